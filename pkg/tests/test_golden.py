"""Frozen end-to-end outputs: a tiny checkpoint, one scene, and its selection record."""
from pathlib import Path

from click.testing import CliRunner

from stgr.cli import cli, golden_record
from stgr.config import preset
from stgr.synth import derive_seed, generate_scene, load_scene
from stgr.training import load_network, save_network, train_loop

FIXTURES = Path(__file__).parent / "fixtures"


def golden_recipe():
    cfg = preset("tiny").replace(epochs=40, batch_size=4, lr=1e-2, seed=5, tau_sel=0.05)
    train = [generate_scene(cfg.phantom, derive_seed(5, i), f"g{i:02d}").with_labels() for i in range(8)]
    return train_loop(train, cfg).network


def test_golden_record_matches_fixture():
    rec = golden_record(load_scene(FIXTURES / "golden_scene.json"), load_network(FIXTURES / "golden_tiny.ckpt"))
    assert rec == (FIXTURES / "golden_selection.json").read_text()


def test_golden_cli_output_matches_fixture():
    res = CliRunner().invoke(cli, ["golden", "--scene", str(FIXTURES / "golden_scene.json"),
                                   "--checkpoint", str(FIXTURES / "golden_tiny.ckpt")])
    assert res.exit_code == 0
    assert res.output == (FIXTURES / "golden_selection.json").read_text()


def test_recipe_rebuilds_fixture_bytes(tmp_path):
    save_network(golden_recipe(), tmp_path / "g.ckpt")
    assert (tmp_path / "g.ckpt").read_bytes() == (FIXTURES / "golden_tiny.ckpt").read_bytes()
    scene = generate_scene(preset("tiny").phantom, derive_seed(5, 100), "golden")
    assert scene.to_json() == (FIXTURES / "golden_scene.json").read_text()
