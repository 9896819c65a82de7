"""Run configuration: every hyperparameter with its default, plus presets."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .synth import PhantomConfig

HEADS = ("stgr", "linear", "cosine")

# Declared parameter counts of the foundation backbones that are frozen and
# absent from this build; they only enter trainable-fraction accounting.
DEFAULT_VIRTUAL_BACKBONES = {
    "llama3_v_8b": 8_000_000_000,
    "groundingdino_swin_t": 172_000_000,
    "medsam_vit_b": 93_700_000,
    "dinov2_vit_l14": 304_000_000,
}

ALIASES = {
    "lambda_align": "lambda_nce",
    "lambda_1": "lambda_nce",
    "lambda_2": "lambda_reg",
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    head: str = "stgr"
    # text side
    d_t: int = 32
    vocab_size: int = 64
    text_blocks: int = 2
    text_heads: int = 4
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.05
    use_text_encoder: bool = True
    proj_hidden: int | None = None
    # graph reasoner
    d_v: int = 64
    graph_layers: int = 3
    graph_heads: int = 4
    adapter_dim: int = 64
    edge_topk: int | None = None
    tau_sel: float = 0.5
    # optimisation
    lr: float = 1e-4
    lr_min: float | None = None
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 50
    max_grad_norm: float | None = None
    lambda_ce: float = 1.0
    lambda_nce: float = 0.5
    lambda_reg: float = 0.5
    tau_nce: float = 0.07
    match_threshold: float = 0.5
    ce_eps: float = 1e-7
    # evaluation / bookkeeping
    folds: int = 5
    threads: int = 1
    virtual_backbones: dict = field(default_factory=lambda: dict(DEFAULT_VIRTUAL_BACKBONES))
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def __post_init__(self):
        if isinstance(self.phantom, dict):
            object.__setattr__(self, "phantom", PhantomConfig.from_dict(self.phantom))
        self.validate()

    @property
    def proj_width(self) -> int:
        return self.proj_hidden if self.proj_hidden is not None else 2 * self.d_v

    @property
    def lr_floor(self) -> float:
        return self.lr_min if self.lr_min is not None else self.lr / 100.0

    def validate(self) -> None:
        def check(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg} (got {getattr(self, key)!r})")

        check(self.head in HEADS, "head", f"must be one of {HEADS}")
        for key in ("d_t", "d_v", "vocab_size", "text_heads", "graph_heads", "adapter_dim",
                    "lora_rank", "batch_size", "threads"):
            check(isinstance(getattr(self, key), int) and getattr(self, key) >= 1, key, "must be a positive integer")
        for key in ("text_blocks", "graph_layers", "epochs"):
            check(isinstance(getattr(self, key), int) and getattr(self, key) >= 0, key, "must be a non-negative integer")
        check(self.d_v % self.graph_heads == 0, "graph_heads", "must divide d_v")
        check(self.d_t % self.text_heads == 0, "text_heads", "must divide d_t")
        check(self.d_v % 2 == 0, "d_v", "must be even (heads use d_v/2 hidden units)")
        check(self.proj_hidden is None or self.proj_hidden >= 1, "proj_hidden", "must be positive")
        check(self.edge_topk is None or self.edge_topk >= 1, "edge_topk", "must be positive")
        check(0.0 <= self.tau_sel <= 1.0, "tau_sel", "must lie in [0, 1]")
        check(0.0 <= self.lora_dropout < 1.0, "lora_dropout", "must lie in [0, 1)")
        check(self.lora_alpha > 0, "lora_alpha", "must be positive")
        check(self.lr >= 0, "lr", "must be non-negative")
        check(self.lr_min is None or 0 <= self.lr_min <= self.lr, "lr_min", "must lie in [0, lr]")
        check(self.weight_decay >= 0, "weight_decay", "must be non-negative")
        check(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "beta1", "betas must lie in [0, 1)")
        check(self.adam_eps > 0, "adam_eps", "must be positive")
        check(self.max_grad_norm is None or self.max_grad_norm > 0, "max_grad_norm", "must be positive")
        for key in ("lambda_ce", "lambda_nce", "lambda_reg"):
            check(getattr(self, key) >= 0, key, "must be non-negative")
        check(self.tau_nce > 0, "tau_nce", "temperature must be positive")
        check(0.0 < self.match_threshold <= 1.0, "match_threshold", "must lie in (0, 1]")
        check(0.0 < self.ce_eps < 0.5, "ce_eps", "must lie in (0, 0.5)")
        check(self.folds >= 2, "folds", "need at least 2 folds")
        check(isinstance(self.virtual_backbones, dict)
              and all(isinstance(v, int) and v >= 0 for v in self.virtual_backbones.values()),
              "virtual_backbones", "must map names to non-negative integer counts")

    # -- (de)serialization --------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, value in d.items():
            canonical = ALIASES.get(key, key)
            if canonical not in known:
                raise ConfigError(f"unknown config key: {key!r}")
            if canonical in kw:
                raise ConfigError(f"config key given twice (via alias): {canonical!r}")
            kw[canonical] = value
        if isinstance(kw.get("phantom"), dict):
            kw["phantom"] = PhantomConfig.from_dict(kw["phantom"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phantom"] = self.phantom.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> "RunConfig":
        if isinstance(changes.get("phantom"), dict):
            changes["phantom"] = replace(self.phantom, **changes["phantom"])
        return replace(self, **changes)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed config ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be an object")
    if "preset" in doc:
        base = preset(doc.pop("preset")).to_dict()
        phantom = {**base.pop("phantom"), **doc.pop("phantom", {})}
        base.update({ALIASES.get(k, k): v for k, v in doc.items()})
        base["phantom"] = phantom
        doc = base
    return RunConfig.from_dict(doc)


def preset(name: str) -> RunConfig:
    """Named scaled-down configurations used by the acceptance runs."""
    if name == "default":
        return RunConfig()
    if name == "overfit":
        return RunConfig(epochs=200)
    if name == "benchmark":
        # narrow features keep the graph head from memorizing per-candidate noise
        return RunConfig(d_v=16, adapter_dim=16, epochs=12, batch_size=16, lr=1e-2,
                         phantom=PhantomConfig(d_v=16, overlap=0.6, rho=0.7, feature_noise=1.25,
                                               duplicates=(3, 4), max_candidates=16))
    if name == "tiny":
        return RunConfig(d_t=8, d_v=8, vocab_size=16, text_heads=2, lora_rank=4, lora_alpha=8.0,
                         graph_layers=2, graph_heads=2, adapter_dim=8, lora_dropout=0.0,
                         phantom=PhantomConfig(height=32, width=32, d_v=8, d_t=8,
                                               lesion_radius=(3.0, 5.0), confounder_length=(8.0, 12.0),
                                               confounder_width=(1.0, 2.0), spurious_radius=(2.0, 3.0),
                                               min_candidates=4, max_candidates=6))
    raise ConfigError(f"unknown preset {name!r}")
