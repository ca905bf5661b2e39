"""U-shaped segmentation network with WISER-filtered skip connections."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from wisernet.autodiff import functional as F
from wisernet.autodiff.checkpoint import load_checkpoint, save_checkpoint
from wisernet.autodiff.nn import Conv2d, ConvReLUStack, Module
from wisernet.autodiff.tensor import Tensor, as_tensor, concat, get_default_dtype, profile
from wisernet.exceptions import ConfigurationError, LoadError
from wisernet.wiser import WiserOutput, WiserParams, wiser_forward


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``depth`` encoder levels produce maps at ``H / 2**l`` with
    ``base_width * 2**(l-1)`` channels; inputs must be divisible by
    ``2**(depth + 1)`` so the deepest WISER block still sees 2x2 bands.
    """

    depth: int = 4
    base_width: int = 8
    in_channels: int = 3
    num_classes: int = 2
    wiser_enabled: bool = True
    ds_enabled: bool = True
    alpha: float = 0.5
    beta: float = 0.5
    eps_gate: float = 0.25
    kappa: float = 1.0
    a0: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigurationError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 1 or self.in_channels < 1 or self.num_classes < 1:
            raise ConfigurationError("widths and channel counts must be positive")

    @property
    def widths(self) -> List[int]:
        return [self.base_width * 2**level for level in range(self.depth)]

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.depth + 1)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, object]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw[f.name]
            if f.type in ("bool", bool) and isinstance(value, str):
                value = value.strip().lower() in ("1", "true", "yes", "on")
            elif f.type in ("int", int):
                value = int(value)
            elif f.type in ("float", float):
                value = float(value)
            kwargs[f.name] = value
        return cls(**kwargs)

    def config_hash(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_dict().items()) if k != "seed")
        return hashlib.sha256(text.encode()).hexdigest()[:12]


@dataclass
class ForwardOutput:
    main_probs: Tensor
    aux_probs: List[Tensor] = field(default_factory=list)
    aux_logits: List[Tensor] = field(default_factory=list)
    ortho_terms: List[Tensor] = field(default_factory=list)
    bottleneck: Optional[Tensor] = None
    skip_features: Optional[List[Tensor]] = None
    filtered_skips: Optional[List[Tensor]] = None
    wiser_outputs: Optional[List[WiserOutput]] = None


class WaveSegNet(Module):
    """Encoder, bottleneck, WISER skip filters, decoder and sigmoid heads.

    Each component draws its initial weights from its own child generator,
    so models that differ only in ``wiser_enabled``/``ds_enabled`` share
    encoder, decoder and main-head initialization for the same seed.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        widths = config.widths
        L = config.depth
        enc_rng, bot_rng, wiser_rng, dec_rng, head_rng, aux_rng = [
            np.random.default_rng(s) for s in np.random.SeedSequence([config.seed, 17]).spawn(6)
        ]
        self.encoder = [
            ConvReLUStack(config.in_channels if i == 0 else widths[i - 1], widths[i], enc_rng, first_stride=2)
            for i in range(L)
        ]
        self.bottleneck = ConvReLUStack(widths[-1], widths[-1], bot_rng)
        self.wiser = [
            WiserParams(
                w,
                wiser_rng,
                alpha=config.alpha,
                beta=config.beta,
                eps_gate=config.eps_gate,
                kappa=config.kappa,
                a0=config.a0,
            )
            for w in widths
        ] if config.wiser_enabled else []
        # decoder[i] produces d_{i+1}; the deepest one fuses the bottleneck.
        self.decoder = [
            ConvReLUStack((widths[i + 1] if i + 1 < L else widths[-1]) + widths[i], widths[i], dec_rng)
            for i in range(L)
        ]
        self.main_head = Conv2d(widths[0], config.num_classes, kernel_size=1, rng=head_rng)
        self.aux_heads = [
            Conv2d(widths[i], config.num_classes, kernel_size=1, rng=aux_rng) for i in range(1, L)
        ] if config.ds_enabled else []

    def forward(self, x, retain_features: bool = False) -> ForwardOutput:
        return model_forward(x, self, retain_features)


def check_input(x: Tensor, config: ModelConfig) -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"expected a (B, C, H, W) batch, got shape {x.shape}")
    if x.shape[1] != config.in_channels:
        raise ConfigurationError(f"expected {config.in_channels} input channels, got {x.shape[1]}")
    m = config.size_multiple
    if x.shape[2] % m or x.shape[3] % m:
        raise ConfigurationError(
            f"input size {x.shape[2]}x{x.shape[3]} is not divisible by 2**(depth+1) = {m}"
        )


def encoder_forward(x: Tensor, model: WaveSegNet) -> List[Tensor]:
    check_input(x, model.config)
    skips = []
    h = x
    for block in model.encoder:
        h = block(h)
        skips.append(h)
    return skips


def filter_skips(skips: Sequence[Tensor], model: WaveSegNet):
    """Apply the per-level WISER block; identity when WISER is disabled."""
    if not model.wiser:
        return list(skips), [], []
    if len(model.wiser) != len(skips):
        raise ConfigurationError(f"{len(model.wiser)} WISER blocks for {len(skips)} skip levels")
    outputs = [wiser_forward(s, p) for s, p in zip(skips, model.wiser)]
    return [o.s_tilde for o in outputs], [o.ortho_term for o in outputs], outputs


def decode_forward(b: Tensor, filtered_skips: Sequence[Tensor], model: WaveSegNet) -> List[Tensor]:
    """Return decoder states ``[d_L, ..., d_1]``."""
    L = model.config.depth
    states = []
    d = None
    for i in reversed(range(L)):
        skip = filtered_skips[i]
        prev = b if d is None else F.upsample(d, 2, "bilinear")
        if prev.shape[2:] != skip.shape[2:]:
            raise ConfigurationError(f"decoder input {prev.shape} does not align with skip {skip.shape}")
        block = model.decoder[i]
        expected = block.convs[0].in_channels
        if prev.shape[1] + skip.shape[1] != expected:
            raise ConfigurationError(
                f"decoder level {i + 1} expects {expected} channels, got {prev.shape[1] + skip.shape[1]}"
            )
        d = block(concat([prev, skip], axis=1))
        states.append(d)
    return states


def model_forward(x, model: WaveSegNet, retain_features: bool = False) -> ForwardOutput:
    x = as_tensor(x)
    skips = encoder_forward(x, model)
    b = model.bottleneck(skips[-1])
    filtered, ortho_terms, wiser_outputs = filter_skips(skips, model)
    states = decode_forward(b, filtered, model)  # d_L .. d_1
    d1 = states[-1]
    main = F.sigmoid(F.upsample(model.main_head(d1), 2, "bilinear"))
    aux_logits, aux_probs = [], []
    for level, head in zip(range(2, model.config.depth + 1), model.aux_heads):
        z = head(states[-level])
        aux_logits.append(z)
        aux_probs.append(F.sigmoid(z))
    out = ForwardOutput(main, aux_probs, aux_logits, ortho_terms, bottleneck=b)
    if retain_features:
        out.skip_features = skips
        out.filtered_skips = filtered
        out.wiser_outputs = wiser_outputs
    return out


def model_summary(model: Module, input_size: int = 64, in_channels: Optional[int] = None) -> Dict[str, int]:
    """Parameter count, conv MACs and activation bytes for one image.

    MACs count ``out_elements * k * k * C_in`` per convolution. Activation
    bytes sum every intermediate tensor of a forward pass, all of which stay
    alive until backward.
    """
    cfg = getattr(model, "config", None)
    channels = in_channels if in_channels is not None else (cfg.in_channels if cfg else 3)
    x = Tensor(np.zeros((1, channels, input_size, input_size)), dtype=get_default_dtype())
    with profile() as prof:
        model(x)
    return {
        "params": model.num_parameters(),
        "macs": prof.macs,
        "peak_activation_bytes": prof.activation_bytes,
    }


SUMMARY_COLUMNS = ("config_hash", "params", "macs", "peak_bytes")


def write_summary_csv(path, rows: Sequence[Dict[str, object]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([row["config_hash"], row["params"], row["macs"], row["peak_bytes"]])


MODEL_META_PREFIX = "model."


def save_model(path, model: WaveSegNet, extra_meta: Optional[Dict[str, object]] = None) -> None:
    """Write weights plus the architecture under ``model.*`` metadata keys."""
    meta = {f"{MODEL_META_PREFIX}{k}": v for k, v in model.config.to_dict().items()}
    meta["model.config_hash"] = model.config.config_hash()
    meta.update(extra_meta or {})
    save_checkpoint(path, [(name, p.data) for name, p in model.named_parameters()], meta)


def load_model(path) -> Tuple[WaveSegNet, Dict[str, str]]:
    """Rebuild a model from a checkpoint; returns ``(model, meta)``.

    Raises:
        LoadError: on an unreadable file or weights that do not match the
            stored architecture.
    """
    meta, tensors = load_checkpoint(path)
    raw = {k[len(MODEL_META_PREFIX):]: v for k, v in meta.items() if k.startswith(MODEL_META_PREFIX)}
    if "depth" not in raw:
        raise LoadError(f"{path}: checkpoint carries no model configuration")
    model = WaveSegNet(ModelConfig.from_dict(raw))
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise LoadError(f"{path}: weights do not match the stored architecture ({exc})") from exc
    return model, meta
