"""Model state: channel plan, learnable parameters, subsets, checkpoints.

The parameter tree is a flat name -> Tensor dict. Initialization draws each
parameter from its own generator seeded by (seed, name), so two models built
with the same seed but different feature flags share bit-identical values for
every parameter they have in common; ablation differences then come from the
architecture, not from reshuffled randomness.
"""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ContractError, FormatError
from .tensor import Tensor

CHECKPOINT_VERSION = 1

LAMBDAS = (85.0, 170.0, 380.0, 840.0)

# Initial quantization steps, geometric from coarse (low rate) to fine.
_Q_INIT = (3.0, 1.5, 0.72, 0.35)


@dataclass
class CodecConfig:
    """Toy channel plan and feature flags."""

    ref_channels: int = 16
    ctx_channels: tuple = (16, 32, 64)
    motion_latent: int = 16
    ctx_latent: int = 32
    hyper_channels: int = 16
    enc_channels: tuple = (32, 64, 64)
    motion_hidden: int = 16
    filter_size: int = 3
    use_confidence: bool = True
    use_dynfilter: bool = True
    lambdas: tuple = LAMBDAS

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("ctx_channels", "enc_channels", "lambdas"):
            d[key] = list(d[key])
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CodecConfig":
        d = json.loads(text)
        for key in ("ctx_channels", "enc_channels", "lambdas"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ModelState:
    config: CodecConfig
    params: dict = field(default_factory=dict)

    def names(self):
        return list(self.params.keys())

    def subset_names(self, subset: str) -> list:
        """Parameter names belonging to a trainable subset (inter/recon/all)."""
        if subset == "all":
            return self.names()
        if subset not in _SUBSET_PREFIXES:
            raise ContractError(f"unknown parameter subset {subset!r}")
        prefixes = _SUBSET_PREFIXES[subset]
        return [n for n in self.params if n.startswith(prefixes)]

    def copy(self) -> "ModelState":
        params = {
            name: Tensor(p.data.copy(), requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        return ModelState(config=self.config, params=params)


_SUBSET_PREFIXES = {
    "inter": ("me.", "menc.", "mdec.", "mhe.", "mhd.", "prior_motion_", "q_motion_"),
    "recon": (
        "miner.", "ifeat.", "enc.", "dec.", "head.",
        "conf_", "dyn_", "che.", "chd.", "prior_ctx_", "q_ctx_",
    ),
}


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0x7FFFFFFF, zlib.crc32(name.encode())])


def _conv_init(rng, cout, cin, k, gain: str):
    fan_in = cin * k * k
    if gain == "lrelu":
        std = np.sqrt(2.0 / (fan_in * (1.0 + 0.1 ** 2)))
    elif gain == "linear":
        std = np.sqrt(1.0 / fan_in)
    elif gain == "small":
        std = 0.1 * np.sqrt(1.0 / fan_in)
    elif gain == "zero":
        std = 0.0
    else:
        raise ContractError(f"unknown init gain {gain!r}")
    return (rng.standard_normal((cout, cin, k, k)) * std).astype(T.default_dtype())


def _add_conv(params, seed, name, cin, cout, k=3, gain="lrelu", bias_fill=0.0):
    rng = _param_rng(seed, name)
    params[name + ".w"] = Tensor(_conv_init(rng, cout, cin, k, gain), requires_grad=True)
    bias = np.full(cout, bias_fill, dtype=T.default_dtype())
    params[name + ".b"] = Tensor(bias, requires_grad=True)


def init_model(config: CodecConfig, seed: int) -> ModelState:
    """Build a fresh model; shapes follow the config's channel plan."""
    p: dict = {}
    g = config.ref_channels
    c0, c1, c2 = config.ctx_channels
    e0, e1, e2 = config.enc_channels
    ml = config.motion_latent
    cl = config.ctx_latent
    hy = config.hyper_channels
    mh = config.motion_hidden
    k2 = config.filter_size ** 2

    # Motion estimation: five convolutions at quarter resolution; the last
    # is zero so an untrained model emits exactly zero flow.
    _add_conv(p, seed, "me.c0", 6, mh)
    _add_conv(p, seed, "me.c1", mh, mh)
    _add_conv(p, seed, "me.c2", mh, mh)
    _add_conv(p, seed, "me.c3", mh, mh)
    _add_conv(p, seed, "me.c4", mh, 2, gain="zero")

    # Motion coder: four stride-2 stages down, mirrored back up.
    _add_conv(p, seed, "menc.c0", 2, mh)
    _add_conv(p, seed, "menc.c1", mh, mh)
    _add_conv(p, seed, "menc.c2", mh, mh)
    _add_conv(p, seed, "menc.c3", mh, ml, gain="linear")
    _add_conv(p, seed, "mdec.c0", ml, mh)
    _add_conv(p, seed, "mdec.c1", mh, mh)
    _add_conv(p, seed, "mdec.c2", mh, mh)
    _add_conv(p, seed, "mdec.c3", mh, mh)
    _add_conv(p, seed, "mdec.c4", mh, 2, gain="small")

    _add_conv(p, seed, "mhe.c0", ml, hy)
    _add_conv(p, seed, "mhe.c1", hy, hy, gain="linear")
    _add_conv(p, seed, "mhd.c0", hy, hy)
    _add_conv(p, seed, "mhd.c1", hy, hy)
    _add_conv(p, seed, "mhd.c2", hy, 2 * ml, gain="linear")
    p["prior_motion_mu"] = Tensor(np.zeros(hy, dtype=T.default_dtype()), requires_grad=True)
    p["prior_motion_logb"] = Tensor(np.zeros(hy, dtype=T.default_dtype()), requires_grad=True)
    for i, q in enumerate(_Q_INIT):
        p[f"q_motion_log.{i}"] = Tensor(
            np.full((1,), np.log(q), dtype=T.default_dtype()), requires_grad=True
        )

    # Temporal context mining: four variants of the first layer, selected by
    # the position of the frame in the hierarchical weight cycle.
    for v in range(4):
        _add_conv(p, seed, f"miner.first{v}", g, c0)
    _add_conv(p, seed, "miner.c1", g, c1)
    _add_conv(p, seed, "miner.c2", g, c2)
    _add_conv(p, seed, "ifeat.c0", 3, g)

    # Contextual encoder; confidence gating and the filter generator hang off
    # it when the flags are on.
    _add_conv(p, seed, "enc.c0", 3 + c0, e0)
    _add_conv(p, seed, "enc.c1", e0 + c1, e1)
    _add_conv(p, seed, "enc.c2", e1 + c2, e2)
    _add_conv(p, seed, "enc.c3", e2, cl, gain="linear")
    if config.use_confidence:
        _add_conv(p, seed, "conf_e.s0", c0 + 3, c0, gain="small", bias_fill=2.0)
        _add_conv(p, seed, "conf_e.s1", c1 + e0, c1, gain="small", bias_fill=2.0)
        _add_conv(p, seed, "conf_e.s2", c2 + e1, c2, gain="small", bias_fill=2.0)
        _add_conv(p, seed, "conf_d.s2", c2 + e1, c2, gain="small", bias_fill=2.0)
        _add_conv(p, seed, "conf_d.s1", c1 + e0, c1, gain="small", bias_fill=2.0)
        _add_conv(p, seed, "conf_d.s0", c0 + g, c0, gain="small", bias_fill=2.0)
    if config.use_dynfilter:
        center = (config.filter_size // 2) * config.filter_size + config.filter_size // 2
        for name in ("dyn_e.gen", "dyn_d.gen"):
            _add_conv(p, seed, name, 3, k2, gain="zero")
            bias = np.zeros(k2, dtype=T.default_dtype())
            bias[center] = 1.0
            p[name + ".b"] = Tensor(bias, requires_grad=True)

    _add_conv(p, seed, "che.c0", cl, hy)
    _add_conv(p, seed, "che.c1", hy, hy, gain="linear")
    _add_conv(p, seed, "chd.c0", hy, hy)
    _add_conv(p, seed, "chd.c1", hy, hy)
    _add_conv(p, seed, "chd.c2", hy, 2 * cl, gain="linear")
    p["prior_ctx_mu"] = Tensor(np.zeros(hy, dtype=T.default_dtype()), requires_grad=True)
    p["prior_ctx_logb"] = Tensor(np.zeros(hy, dtype=T.default_dtype()), requires_grad=True)
    for i, q in enumerate(_Q_INIT):
        p[f"q_ctx_log.{i}"] = Tensor(
            np.full((1,), np.log(q), dtype=T.default_dtype()), requires_grad=True
        )

    # Contextual decoder and frame head; the head's last layer starts at the
    # mid-gray bias so early reconstructions sit inside the clamp interval.
    _add_conv(p, seed, "dec.c0", cl, e1)
    _add_conv(p, seed, "dec.c1", e1, e1)
    _add_conv(p, seed, "dec.c2", e1 + c2, e0)
    _add_conv(p, seed, "dec.c3", e0 + c1, g)
    _add_conv(p, seed, "dec.c4", g + c0, g)
    _add_conv(p, seed, "head.c0", g, g)
    _add_conv(p, seed, "head.c1", g, 3, gain="linear", bias_fill=0.5)

    return ModelState(config=config, params=p)


def m_grid_config(label: str) -> CodecConfig:
    """Ablation presets m1..m8 mapping feature and training-strategy flags.

    Only the architectural flags live on the config; the training flags
    (repeat, long) are read by the schedule builder via m_grid_training.
    """
    conf, dynf, _, _ = _m_grid_flags(label)
    return CodecConfig(use_confidence=conf, use_dynfilter=dynf)


def m_grid_training(label: str) -> tuple:
    """(repeat, long) training-strategy flags of an ablation preset."""
    _, _, repeat, long = _m_grid_flags(label)
    return repeat, long


_M_GRID = {
    "m1": (False, False, False, False),
    "m2": (True, False, False, False),
    "m3": (True, True, False, False),
    "m4": (False, False, True, False),
    "m5": (False, False, True, True),
    "m6": (True, True, True, False),
    "m7": (True, True, False, True),
    "m8": (True, True, True, True),
    # Pair isolating the dynamic-filter module under the full strategy.
    "m8_nofilter": (True, False, True, True),
}


def _m_grid_flags(label: str):
    if label not in _M_GRID:
        raise ContractError(f"unknown ablation label {label!r}")
    return _M_GRID[label]


def ablation_labels():
    return [k for k in _M_GRID if not k.endswith("nofilter")]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: ModelState, optimizer_state: dict | None = None, extra: dict | None = None):
    """Versioned binary checkpoint of parameters plus optimizer moments."""
    payload = {
        "__meta__": np.frombuffer(
            json.dumps(
                {
                    "version": CHECKPOINT_VERSION,
                    "config": model.config.to_json(),
                    "extra": extra or {},
                }
            ).encode(),
            dtype=np.uint8,
        )
    }
    for name, t in model.params.items():
        payload["param:" + name] = t.data
    if optimizer_state:
        for name, (m, v, step) in optimizer_state.items():
            payload["adam_m:" + name] = m
            payload["adam_v:" + name] = v
            payload["adam_t:" + name] = np.asarray(step, dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Load a checkpoint; returns (model, optimizer_state, extra)."""
    try:
        with np.load(path, allow_pickle=False) as z:
            if "__meta__" not in z:
                raise FormatError(f"{path}: not a codec checkpoint")
            meta = json.loads(bytes(z["__meta__"].tobytes()).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise FormatError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            config = CodecConfig.from_json(meta["config"])
            params = {}
            opt: dict = {}
            for key in z.files:
                if key.startswith("param:"):
                    params[key[6:]] = Tensor(z[key].copy(), requires_grad=True)
            for key in z.files:
                if key.startswith("adam_m:"):
                    name = key[7:]
                    opt[name] = (
                        z["adam_m:" + name].copy(),
                        z["adam_v:" + name].copy(),
                        int(z["adam_t:" + name]),
                    )
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc})") from exc
    return ModelState(config=config, params=params), (opt or None), meta.get("extra", {})
