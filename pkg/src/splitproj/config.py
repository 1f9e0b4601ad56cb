"""Flat TOML experiment configuration.

Every key is top level; tables are rejected.  See ``docs/config.md``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace

import tomli

from .errors import ConfigError

BOTTLENECKS = ("raw", "projection", "learned-1x1")
MODES = ("LS-F", "LS-L")
ARCHS = ("mlp", "linear", "cnn")
ATTACKS = ("none", "decoder", "gradient_match", "both")


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "blobs"
    classes: int = 4
    per_class: int = 1000
    dims: int = 256
    spread: float = 0.3
    idx_images: str = ""
    idx_labels: str = ""
    test_fraction: float = 0.2
    aux_fraction: float = 0.2
    # clients
    n_clients: int = 10
    alpha: float = 1e7
    ownership: str = "SCH"
    # model
    arch: str = "mlp"
    head_depth: int = 1
    width: int = 256
    # cut
    bottleneck: str = "projection"
    k: int = 0  # 0 means derive from cr
    cr: float = 8.0
    mode: str = "LS-F"
    liftback_hidden: int = 128
    projection: str = "gaussian"
    lambda_wcc: float = 0.0
    # optimization
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    rounds: int = 5
    eval_every: int = 1
    # seeds
    seed: int = 0
    projection_seed: int = -1  # -1 means same as seed
    # carrier
    transport: str = "inproc"
    address: str = "127.0.0.1:0"
    timeout: float = 60.0
    # poisoning and screening
    poison_rate: float = 0.0
    poison_target: int = 0
    malicious_fraction: float = 0.1
    detect: bool = False
    detect_source: str = "u"
    # attacks
    attack: str = "none"
    attack_images: int = 16
    attack_epochs: int = 100
    attack_lr: float = 2e-3
    attack_decoder: str = "mlp"
    attack_iterations: int = 300
    save_images: bool = True
    out_dir: str = "runs/latest"

    @property
    def effective_projection_seed(self) -> int:
        return self.seed if self.projection_seed < 0 else self.projection_seed

    def sample_shape(self) -> tuple:
        side = math.isqrt(self.dims)
        return (1, side, side)

    def cut_dim(self, sample_shape=None) -> int:
        c, h, w = sample_shape or self.sample_shape()
        if self.arch in ("mlp", "linear"):
            return self.width
        return 8 * (h // 2) * (w // 2)

    def payload_k(self, sample_shape=None) -> int:
        d = self.cut_dim(sample_shape)
        if self.bottleneck == "raw":
            return d
        if self.bottleneck == "projection":
            return self.k if self.k > 0 else max(1, round(d / self.cr))
        return 0  # learned-1x1 width depends on the channel layout

    def label(self) -> str:
        if self.bottleneck == "raw":
            name = "raw"
        elif self.bottleneck == "projection":
            name = f"proj-k{self.payload_k()}-{self.mode}"
        else:
            name = f"1x1-cr{self.cr:g}"
        return name + (f"-wcc{self.lambda_wcc:g}" if self.lambda_wcc else "")


_DEFAULTS = {f.name: f.default for f in fields(ExperimentConfig)}


def _coerce(key, value):
    kind = type(_DEFAULTS[key])
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.dataset in ("blobs", "idx"), f"dataset must be 'blobs' or 'idx', got {cfg.dataset!r}")
    if cfg.dataset == "idx":
        need(cfg.idx_images and cfg.idx_labels, "dataset 'idx' needs idx_images and idx_labels")
    else:
        need(cfg.classes >= 2, f"classes must be >= 2, got {cfg.classes}")
        need(math.isqrt(cfg.dims) ** 2 == cfg.dims, f"dims must be a perfect square, got {cfg.dims}")
        need(cfg.per_class >= 1, "per_class must be >= 1")
    need(0 <= cfg.test_fraction < 1 and 0 <= cfg.aux_fraction < 1
         and cfg.test_fraction + cfg.aux_fraction < 1, "test_fraction + aux_fraction must be < 1")
    need(cfg.n_clients >= 1, f"n_clients must be >= 1, got {cfg.n_clients}")
    need(cfg.alpha > 0, f"alpha must be positive, got {cfg.alpha}")
    need(cfg.ownership in ("SCH", "PCH"), f"ownership must be SCH or PCH, got {cfg.ownership!r}")
    need(cfg.arch in ARCHS, f"arch must be one of {ARCHS}, got {cfg.arch!r}")
    need(cfg.head_depth >= 1, "head_depth must be >= 1")
    need(cfg.width >= 1, "width must be >= 1")
    need(cfg.bottleneck in BOTTLENECKS, f"bottleneck must be one of {BOTTLENECKS}, got {cfg.bottleneck!r}")
    need(cfg.mode in MODES, f"mode must be LS-F or LS-L, got {cfg.mode!r}")
    need(cfg.cr >= 1, f"cr must be >= 1, got {cfg.cr}")
    need(cfg.k >= 0, f"k must be >= 0, got {cfg.k}")
    need(cfg.projection in ("gaussian", "uniform"), f"unknown projection {cfg.projection!r}")
    need(cfg.lambda_wcc >= 0, f"lambda_wcc must be >= 0, got {cfg.lambda_wcc}")
    need(cfg.optimizer in ("adam", "sgd"), f"optimizer must be adam or sgd, got {cfg.optimizer!r}")
    need(cfg.lr > 0 and cfg.batch_size >= 1, "lr must be positive and batch_size >= 1")
    need(cfg.rounds >= 0 and cfg.eval_every >= 1, "rounds must be >= 0 and eval_every >= 1")
    need(cfg.seed >= 0, "seed must be >= 0")
    need(cfg.transport in ("inproc", "tcp"), f"transport must be inproc or tcp, got {cfg.transport!r}")
    need(0 <= cfg.poison_rate <= 1, f"poison_rate must lie in [0, 1], got {cfg.poison_rate}")
    need(0 <= cfg.malicious_fraction <= 1, "malicious_fraction must lie in [0, 1]")
    need(cfg.detect_source in ("u", "z"), "detect_source must be 'u' or 'z'")
    need(cfg.attack in ATTACKS, f"attack must be one of {ATTACKS}, got {cfg.attack!r}")
    need(cfg.attack_decoder in ("mlp", "linear"), "attack_decoder must be mlp or linear")
    need(cfg.attack_lr > 0 and cfg.attack_epochs >= 0, "attack_lr must be positive, attack_epochs >= 0")
    if cfg.bottleneck == "projection" and cfg.dataset == "blobs":
        d, k = cfg.cut_dim(), cfg.payload_k()
        need(k <= d, f"k={k} exceeds the cut dimension d={d}")
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for key, value in doc.items():
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        if isinstance(value, dict):
            raise ConfigError(f"{key}: tables are not supported")
        values[key] = _coerce(key, value)
    return validate(ExperimentConfig(**values))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        return parse_config(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc})") from None


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isinf(v) or math.isnan(v):
            raise ConfigError("non-finite values cannot be serialized")
        return repr(v)
    if isinstance(v, int):
        return str(v)
    return _toml_string(v)


_ESCAPES = {'"': '\\"', "\\": "\\\\", "\b": "\\b", "\t": "\\t", "\n": "\\n", "\f": "\\f",
            "\r": "\\r"}


def _toml_string(s: str) -> str:
    """Basic TOML string; control characters use ``\\uXXXX`` escapes."""
    out = []
    for ch in s:
        if ch in _ESCAPES:
            out.append(_ESCAPES[ch])
        elif ord(ch) < 0x20 or ord(ch) == 0x7F:
            out.append(f"\\u{ord(ch):04X}")
        else:
            out.append(ch)
    return '"' + "".join(out) + '"'


def serialize_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in asdict(cfg).items())


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    for key in changes:
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
    return validate(replace(cfg, **{k: _coerce(k, v) for k, v in changes.items()}))


def config_hash(cfg: ExperimentConfig) -> str:
    """Binds results to inputs; the output location is not an input."""
    body = asdict(cfg)
    body.pop("out_dir")
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]
