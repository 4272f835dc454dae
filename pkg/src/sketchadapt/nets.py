"""Networks: shared encoder, projection head, decoders, stroke-weight net.

All modules are plain ``nn.Module`` subclasses whose forward passes are
deterministic given parameters. Normalization is GroupNorm throughout so
single-sample test-time passes behave exactly like batched ones. The
encoder's final linear layer (``encoder.fc``) doubles as the designated
block against which per-stroke gradient features are taken.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from sketchadapt.errors import CheckpointError, ConfigError, InvalidSketch, ShapeError

CHECKPOINT_VERSION = 1

TEACHER_FORCED = "teacher_forced"
AUTOREGRESSIVE = "autoregressive"

PARAM_GROUPS = ("encoder", "primary", "sketch_decoder", "photo_decoder", "eta_net", "alpha")


@dataclass(frozen=True)
class NetConfig:
    canvas: int = 64
    feature_dim: int = 128  # d
    primary_dim: int = 64  # d_p
    sketch_aux_dim: int = 128  # d_aS
    photo_aux_dim: int = 128  # d_aP
    hidden_size: int = 128  # GRU hidden state
    channels: tuple[int, ...] = (16, 32, 64, 128)
    norm_groups: int = 8
    eta_hidden: tuple[int, int] = (64, 32)
    alpha_init: float = 5e-4

    def validate(self) -> None:
        if self.primary_dim >= self.feature_dim:
            raise ConfigError(
                f"primary_dim must be < feature_dim ({self.primary_dim} >= {self.feature_dim})"
            )
        if len(self.channels) != 4:
            raise ConfigError("encoder uses exactly 4 stride-2 blocks")
        if any(c % self.norm_groups for c in self.channels):
            raise ConfigError(f"channels {self.channels} not divisible by {self.norm_groups} groups")
        if self.canvas < 16 or self.canvas % 16:
            raise ConfigError("canvas must be >= 16 and divisible by 16")
        if min(self.feature_dim, self.sketch_aux_dim, self.photo_aux_dim, self.hidden_size) < 1:
            raise ConfigError("dimensions must be positive")
        if self.alpha_init <= 0:
            raise ConfigError("alpha_init must be > 0")


class Encoder(nn.Module):
    """4 stride-2 conv blocks with GroupNorm, pooled and projected to d."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.canvas = cfg.canvas
        blocks = []
        prev = 3
        for c in cfg.channels:
            blocks += [
                nn.Conv2d(prev, c, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(cfg.norm_groups, c),
                nn.ReLU(),
            ]
            prev = c
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(prev, cfg.feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (self.canvas, self.canvas):
            raise ShapeError(
                f"expected (B, 3, {self.canvas}, {self.canvas}) input, got {tuple(x.shape)}"
            )
        h = self.blocks(x)
        return self.fc(h.mean(dim=(2, 3)))


class PrimaryHead(nn.Module):
    """Affine map from the shared feature to the retrieval space."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.fc = nn.Linear(cfg.feature_dim, cfg.primary_dim)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-1] != self.fc.in_features:
            raise ShapeError(f"expected feature dim {self.fc.in_features}, got {f.shape[-1]}")
        return self.fc(f)


class SketchDecoder(nn.Module):
    """Recurrent stroke-5 decoder conditioned on the reduced sketch feature.

    Each step consumes [reduced feature, previous point] where the previous
    point is the ground-truth row under teacher forcing or the previous
    prediction when run autoregressively; step 0 uses a zero token in both
    modes.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.reduce = nn.Linear(cfg.feature_dim, cfg.sketch_aux_dim)
        self.init_h = nn.Linear(cfg.sketch_aux_dim, cfg.hidden_size)
        self.cell = nn.GRUCell(cfg.sketch_aux_dim + 5, cfg.hidden_size)
        self.out = nn.Linear(cfg.hidden_size, 5)

    def forward(self, feature: torch.Tensor, targets: torch.Tensor, mode: str = TEACHER_FORCED):
        if mode not in (TEACHER_FORCED, AUTOREGRESSIVE):
            raise ValueError(f"unknown decode mode {mode!r}")
        if feature.ndim != 1:
            raise ShapeError(f"expected a single feature vector, got shape {tuple(feature.shape)}")
        steps = targets.shape[0]
        if steps == 0:
            raise InvalidSketch("cannot decode an empty sequence")
        red = self.reduce(feature).unsqueeze(0)
        h = self.init_h(red)
        prev = torch.zeros(1, 5, dtype=feature.dtype, device=feature.device)
        outputs = []
        for t in range(steps):
            h = self.cell(torch.cat([red, prev], dim=1), h)
            psi = self.out(h)
            outputs.append(psi)
            prev = targets[t].unsqueeze(0).to(feature.dtype) if mode == TEACHER_FORCED else psi
        return torch.cat(outputs, dim=0)


class PhotoDecoder(nn.Module):
    """Transposed-conv decoder from the reduced photo feature to an edgemap."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.reduce = nn.Linear(cfg.feature_dim, cfg.photo_aux_dim)
        chans = tuple(reversed(cfg.channels))
        self.start = cfg.canvas // 16
        self.start_c = chans[0]
        self.fc = nn.Linear(cfg.photo_aux_dim, chans[0] * self.start * self.start)
        ups = []
        for i in range(3):
            ups += [
                nn.ConvTranspose2d(chans[i], chans[i + 1], kernel_size=4, stride=2, padding=1),
                nn.GroupNorm(cfg.norm_groups, chans[i + 1]),
                nn.ReLU(),
            ]
        ups.append(nn.ConvTranspose2d(chans[3], 3, kernel_size=4, stride=2, padding=1))
        self.ups = nn.Sequential(*ups)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        squeeze = f.ndim == 1
        if squeeze:
            f = f.unsqueeze(0)
        h = self.fc(self.reduce(f))
        h = h.view(-1, self.start_c, self.start, self.start)
        img = (torch.tanh(self.ups(h)) + 1.0) / 2.0
        return img.squeeze(0) if squeeze else img


class StrokeWeightNet(nn.Module):
    """3-layer MLP over concatenated gradient features, squashed to (0, 1)."""

    def __init__(self, in_dim: int, hidden: tuple[int, int]):
        super().__init__()
        self.in_dim = in_dim
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden[0]),
            nn.ReLU(),
            nn.Linear(hidden[0], hidden[1]),
            nn.ReLU(),
            nn.Linear(hidden[1], 1),
        )

    def forward(self, j: torch.Tensor) -> torch.Tensor:
        if j.shape[-1] != self.in_dim:
            raise ShapeError(f"expected gradient features of dim {self.in_dim}, got {j.shape[-1]}")
        return torch.sigmoid(self.mlp(j)).squeeze(-1)


class RetrievalModel(nn.Module):
    """All trainable state: four parameter groups, the eta net, and alpha."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.primary = PrimaryHead(cfg)
        self.sketch_decoder = SketchDecoder(cfg)
        self.photo_decoder = PhotoDecoder(cfg)
        phi_dim = cfg.channels[-1] * cfg.feature_dim + cfg.feature_dim
        self.eta_net = StrokeWeightNet(2 * phi_dim, cfg.eta_hidden)
        self.alpha = nn.Parameter(torch.tensor(float(cfg.alpha_init)))

    @property
    def phi_names(self) -> tuple[str, str]:
        """The designated gradient-feature block: the encoder's last linear layer."""
        return ("encoder.fc.weight", "encoder.fc.bias")

    def embed(self, imgs: torch.Tensor) -> torch.Tensor:
        """encode + primary projection + L2 normalization: the metric space.

        Normalization bounds squared distances to [0, 4] so the triplet
        margin cannot be satisfied by inflating the feature scale.
        """
        return l2_normalize(self.primary(self.encoder(imgs)))


def l2_normalize(f: torch.Tensor) -> torch.Tensor:
    return f / f.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def group_of(param_name: str) -> str:
    head = param_name.split(".", 1)[0]
    if head not in PARAM_GROUPS:
        raise KeyError(f"parameter {param_name!r} belongs to no known group")
    return head


def subparams(params: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def fcall(module: nn.Module, params: dict[str, torch.Tensor] | None, prefix: str, *args, **kwargs):
    """Run a submodule forward under an explicit model-level parameter dict."""
    if params is None:
        return module(*args, **kwargs)
    return torch.func.functional_call(module, subparams(params, prefix), args, kwargs)


def raster_to_tensor(raster, dtype=torch.float32) -> torch.Tensor:
    """HxWx3 [0,1] array -> (3,H,W) tensor."""
    arr = np.ascontiguousarray(np.moveaxis(raster.pixels, -1, 0))
    return torch.from_numpy(arr).to(dtype)


def clone_params(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def params_equal(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> bool:
    if a.keys() != b.keys():
        return False
    return all(torch.equal(a[k], b[k]) for k in a)


def save_checkpoint(model: RetrievalModel, path, fingerprint: str, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "fingerprint": fingerprint,
        "net_config": dataclasses.asdict(model.cfg),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_fingerprint: str | None = None):
    """Restore a model bit-exactly; returns (model, fingerprint, extra)."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    fingerprint = payload["fingerprint"]
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise CheckpointError(
            f"checkpoint fingerprint {fingerprint} does not match config fingerprint "
            f"{expected_fingerprint}"
        )
    raw = dict(payload["net_config"])
    raw["channels"] = tuple(raw["channels"])
    raw["eta_hidden"] = tuple(raw["eta_hidden"])
    cfg = NetConfig(**raw)
    model = RetrievalModel(cfg)
    sd = payload["state_dict"]
    dtype = sd["alpha"].dtype
    model.to(dtype)
    model.load_state_dict(sd, strict=True)
    return model, fingerprint, payload["extra"]
