"""1D-CNN encoder, linear classifier, 3-layer discriminator; Adam updates, checkpoints, seeding."""
import copy
import json
import logging
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import ClassVar, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .errors import NonFiniteError, ShapeError

log = logging.getLogger(__name__)

FEATURE_DIM = 128
NET_FILENAME = "net.json"
WEIGHTS_FILENAME = "weights.bin"
BN_MOMENTUM = 0.1


@dataclass
class EncoderConfig:
    in_channels: int
    mid_channels: int = 64
    feature_dim: int = FEATURE_DIM
    conv1: tuple[int, int, int] = (5, 1, 2)  # (kernel, stride, padding)
    conv_rest: tuple[int, int, int] = (8, 1, 4)
    maxpool: tuple[int, int, int] = (2, 2, 1)
    dropout_rate: float = 0.5

    def __post_init__(self) -> None:
        self.conv1 = tuple(int(v) for v in self.conv1)
        self.conv_rest = tuple(int(v) for v in self.conv_rest)
        self.maxpool = tuple(int(v) for v in self.maxpool)
        if self.feature_dim != FEATURE_DIM:
            raise ShapeError(f"feature_dim must be {FEATURE_DIM}, got {self.feature_dim}")
        if self.in_channels < 1 or self.mid_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        for k, s, p in (self.conv1, self.conv_rest, self.maxpool):
            if k < 1 or s < 1 or p < 0:
                raise ShapeError(f"invalid (kernel, stride, padding) = {(k, s, p)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @classmethod
    def har(cls, in_channels: int) -> "EncoderConfig":
        """Multivariate HAR-family settings: channels 64 -> 128 -> 128."""
        return cls(in_channels=in_channels, mid_channels=64, conv1=(5, 1, 2), dropout_rate=0.5)

    @classmethod
    def eeg(cls, in_channels: int = 1) -> "EncoderConfig":
        """Univariate EEG settings: channels 32 -> 64 -> 128."""
        return cls(in_channels=in_channels, mid_channels=32, conv1=(26, 5, 13), dropout_rate=0.2)

    @property
    def channels(self) -> tuple[int, int, int]:
        return self.mid_channels, min(2 * self.mid_channels, self.feature_dim), self.feature_dim

    def output_lengths(self, n: int) -> list[int]:
        """Time-axis length after each conv and each pool, in order."""
        lengths = []
        length = n
        for k, s, p in (self.conv1, self.conv_rest, self.conv_rest):
            length = (length + 2 * p - k) // s + 1
            lengths.append(length)
            pk, ps, pp = self.maxpool
            length = (length + 2 * pp - pk) // ps + 1
            lengths.append(length)
        return lengths


class Net(nn.Module):
    role: ClassVar[str] = ""

    def config_dict(self) -> dict:
        raise NotImplementedError


class Encoder(Net):
    """Three conv blocks (conv -> BN -> ReLU -> max-pool), dropout after block 1, adaptive avg pool to 1."""
    role = "encoder"

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.channels
        pk, ps, pp = cfg.maxpool

        def block(c_in: int, c_out: int, conv: tuple[int, int, int]) -> nn.Sequential:
            k, s, p = conv
            return nn.Sequential(
                nn.Conv1d(c_in, c_out, kernel_size=k, stride=s, padding=p, bias=False),
                nn.BatchNorm1d(c_out, momentum=BN_MOMENTUM),
                nn.ReLU(),
                nn.MaxPool1d(kernel_size=pk, stride=ps, padding=pp),
            )

        self.block1 = block(cfg.in_channels, c1, cfg.conv1)
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.block2 = block(c1, c2, cfg.conv_rest)
        self.block3 = block(c2, c3, cfg.conv_rest)
        self.pool = nn.AdaptiveAvgPool1d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected input [b, {self.cfg.in_channels}, n], got {tuple(x.shape)}")
        if min(self.cfg.output_lengths(x.shape[2])) < 1:
            raise ShapeError(f"sequence length {x.shape[2]} too short for this encoder")
        h = self.dropout(self.block1(x))
        h = self.block3(self.block2(h))
        return torch.flatten(self.pool(h), 1)

    def config_dict(self) -> dict:
        return asdict(self.cfg)


class Classifier(Net):
    """Single fully connected layer 128 -> K."""
    role = "classifier"

    def __init__(self, num_classes: int, feature_dim: int = FEATURE_DIM):
        super().__init__()
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.fc = nn.Linear(feature_dim, num_classes)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        _check_width(f, self.feature_dim)
        return self.fc(f)

    def config_dict(self) -> dict:
        return {"num_classes": self.num_classes, "feature_dim": self.feature_dim}


class Discriminator(Net):
    """128 -> 128 -> 128 -> 1 with ReLU hidden activations; forward returns the logit."""
    role = "discriminator"

    def __init__(self, feature_dim: int = FEATURE_DIM, hidden_dim: int = FEATURE_DIM):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.layers = nn.Sequential(
            nn.Linear(feature_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, 1),
        )

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        _check_width(f, self.feature_dim)
        return self.layers(f).squeeze(1)

    def config_dict(self) -> dict:
        return {"feature_dim": self.feature_dim, "hidden_dim": self.hidden_dim}


NetParams = Union[Encoder, Classifier, Discriminator]
_NET_TYPES: dict[str, type] = {"encoder": Encoder, "classifier": Classifier, "discriminator": Discriminator}


def _check_width(f: torch.Tensor, width: int) -> None:
    if f.dim() != 2 or f.shape[1] != width:
        raise ShapeError(f"expected features [b, {width}], got {tuple(f.shape)}")


def build_encoder(cfg: EncoderConfig) -> Encoder:
    return Encoder(cfg)


def build_classifier(num_classes: int) -> Classifier:
    if num_classes < 2:
        raise ShapeError(f"num_classes must be >= 2, got {num_classes}")
    return Classifier(num_classes)


def build_discriminator() -> Discriminator:
    return Discriminator()


def encoder_forward(params: Encoder, x: torch.Tensor, train_mode: bool) -> torch.Tensor:
    """[b, m, n] -> [b, 128]; train_mode toggles dropout sampling and BN statistic updates."""
    params.train(train_mode)
    return params(x)


def classifier_forward(params: Classifier, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (logits, softmax probabilities), both [b, K]."""
    logits = params(f)
    return logits, torch.softmax(logits, dim=1)


def discriminator_forward(params: Discriminator, f: torch.Tensor) -> torch.Tensor:
    """[b, 128] -> [b] logistic outputs."""
    return torch.sigmoid(params(f))


def init_target_from_source(src: Net) -> Net:
    """Deep copy of the source encoder; later updates to the copy never touch src."""
    if src.role != "encoder":
        raise ShapeError(f"target initialisation expects an encoder, got role {src.role!r}")
    return copy.deepcopy(src)


def extract_features(encoder: Encoder, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode features for every sample, [p, 128] float32."""
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            x = torch.as_tensor(np.asarray(samples[start:start + batch_size]), dtype=dtype)
            out.append(encoder(x).cpu().numpy())
    if not out:
        return np.zeros((0, encoder.cfg.feature_dim), dtype=np.float32)
    return np.concatenate(out).astype(np.float32)


# ---- Adam ----

@dataclass
class OptimState:
    """Adam moments live in the wrapped torch optimizer; `steps` counts accepted updates."""
    optimizer: torch.optim.Adam
    steps: int = 0

    @property
    def lr(self) -> list[float]:
        return [g["lr"] for g in self.optimizer.param_groups]

    @property
    def betas(self) -> tuple[float, float]:
        return self.optimizer.param_groups[0]["betas"]


ParamGroups = Sequence[tuple[nn.Module, float]]


def make_optim_state(groups: Union[nn.Module, ParamGroups], lr: Optional[float] = None,
                     betas: tuple[float, float] = (0.5, 0.9), eps: float = 1e-8) -> OptimState:
    """Adam over one module (lr required) or over (module, lr) groups."""
    if isinstance(groups, nn.Module):
        if lr is None:
            raise ValueError("lr is required for a single module")
        groups = [(groups, lr)]
    param_groups = [{"params": list(module.parameters()), "lr": group_lr} for module, group_lr in groups]
    return OptimState(optimizer=torch.optim.Adam(param_groups, betas=betas, eps=eps))


def _modules(params: Union[nn.Module, Iterable[nn.Module]]) -> list[nn.Module]:
    return [params] if isinstance(params, nn.Module) else list(params)


def adam_step(params: Union[nn.Module, Iterable[nn.Module]], state: OptimState,
              grads: Optional[Mapping[str, torch.Tensor]] = None) -> OptimState:
    """Bias-corrected Adam update in place; rejects the batch on any non-finite gradient.

    grads maps qualified parameter names (`named_parameters` of the single module, or
    `<index>.<name>` across several) to tensors; when omitted the `.grad` left by backward() is used.
    """
    modules = _modules(params)
    named = []
    for i, module in enumerate(modules):
        prefix = "" if len(modules) == 1 else f"{i}."
        named.extend((prefix + name, p) for name, p in module.named_parameters())
    if grads is not None:
        missing = sorted({n for n, _ in named} - set(grads))
        if missing:
            raise ShapeError(f"missing gradients for {missing[:5]}")
        for name, p in named:
            g = torch.as_tensor(grads[name], dtype=p.dtype)
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            p.grad = g.clone()
    for name, p in named:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        elif not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for {name}; batch rejected")
    state.optimizer.step()
    state.steps += 1
    return state


def zero_grad(*modules: nn.Module) -> None:
    for module in modules:
        module.zero_grad(set_to_none=True)


# ---- checkpoints ----

def save_net(net: Net, path: Path) -> None:
    """Directory with net.json (role, config, array names/shapes) and weights.bin (f32le, declared order)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = net.state_dict()
    arrays = [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")} for k, v in state.items()]
    with open(path / NET_FILENAME, "w", encoding="utf-8") as f:
        json.dump({"role": net.role, "config": net.config_dict(), "arrays": arrays}, f, indent=2)
    with open(path / WEIGHTS_FILENAME, "wb") as f:
        for v in state.values():
            f.write(v.detach().cpu().numpy().astype("<f4").tobytes())
    log.debug("Wrote checkpoint %s (%s)", path, net.role)


def load_net(path: Path) -> Net:
    path = Path(path)
    with open(path / NET_FILENAME, encoding="utf-8") as f:
        meta = json.load(f)
    role = meta["role"]
    if role not in _NET_TYPES:
        raise ShapeError(f"unknown role {role!r} in {path}")
    cfg = meta["config"]
    if role == "encoder":
        net: Net = Encoder(EncoderConfig(**cfg))
    elif role == "classifier":
        net = Classifier(cfg["num_classes"], cfg["feature_dim"])
    else:
        net = Discriminator(cfg["feature_dim"], cfg["hidden_dim"])
    flat = np.fromfile(path / WEIGHTS_FILENAME, dtype="<f4")
    expected = sum(int(np.prod(a["shape"])) for a in meta["arrays"])
    if flat.size != expected:
        raise ShapeError(f"{WEIGHTS_FILENAME} holds {flat.size} values, net.json declares {expected}")
    state = {}
    offset = 0
    for a in meta["arrays"]:
        size = int(np.prod(a["shape"]))
        chunk = flat[offset:offset + size].reshape(a["shape"])
        state[a["name"]] = torch.from_numpy(chunk.copy()).to(getattr(torch, a["dtype"]))
        offset += size
    net.load_state_dict(state)
    return net


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch; prefer deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
