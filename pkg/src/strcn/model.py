"""Recurrent convolutional network (one conv layer, four RCLs, global pooling, softmax)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, batch_norm, conv2d, global_avg_pool, max_pool2d, relu, softmax
from .autodiff.checkpoint import load_arrays, save_arrays

# Pooling (kernel, stride) per stage Pool1..Pool4, in (rows, cols).
POOL_SCHEDULES: Dict[str, Tuple[Tuple[int, int], ...]] = {
    # Variant A rows index masked pixels, columns index time.
    "A": ((4, 1), (4, 1), (4, 4), (2, 2)),
    "G": ((4, 4), (4, 4), (4, 4), (2, 2)),
}
CONV1_KERNEL = 5
N_RCL_SLOTS = 4


@dataclass
class StrcnConfig:
    variant: str = "G"
    input_shape: Tuple[int, int, int] = (300, 245, 2)
    n_classes: int = 3
    feature_maps: int = 32
    rcl_count: int = 4
    recurrences: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.variant = self.variant.upper()
        if self.variant not in POOL_SCHEDULES:
            raise ValueError(f"variant must be 'A' or 'G', got {self.variant!r}")
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (rows, cols, channels)")
        if self.feature_maps < 1:
            raise ValueError("feature_maps must be >= 1")
        if not 0 <= self.rcl_count <= N_RCL_SLOTS:
            raise ValueError(f"rcl_count must be in [0, {N_RCL_SLOTS}]")
        if self.recurrences < 0:
            raise ValueError("recurrences must be >= 0")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    @property
    def pools(self) -> Tuple[Tuple[int, int], ...]:
        return POOL_SCHEDULES[self.variant]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


def shape_trace(cfg: StrcnConfig) -> List[Tuple[str, Tuple[int, int, int]]]:
    """Closed-form (rows, cols, maps) after every stage of the layer stack."""
    h, w, _ = cfg.input_shape
    m = cfg.feature_maps
    trace = [("input", cfg.input_shape)]
    h, w = h - CONV1_KERNEL + 1, w - CONV1_KERNEL + 1
    if h < 1 or w < 1:
        raise ValueError(f"input {cfg.input_shape[:2]} smaller than the 5x5 Conv1 kernel")
    trace.append(("conv1", (h, w, m)))
    for stage, (kh, kw) in enumerate(cfg.pools, start=1):
        if kh > h or kw > w:
            raise ValueError(
                f"input {cfg.input_shape[:2]} too small for the pooling schedule: "
                f"Pool{stage} window {kh}x{kw} exceeds {h}x{w}"
            )
        h, w = (h - kh) // kh + 1, (w - kw) // kw + 1
        trace.append((f"pool{stage}", (h, w, m)))
        trace.append((f"rcl{stage + 1}", (h, w, m)))
    trace.append(("pool5", (1, 1, m)))
    trace.append(("output", (1, 1, cfg.n_classes)))
    return trace


def _uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    # zero-mean uniform with variance 2 / fan_in
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class BatchNorm:
    def __init__(self, maps: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(maps), requires_grad=True)
        self.beta = Tensor(np.zeros(maps), requires_grad=True)
        self.running_mean = np.zeros(maps)
        self.running_var = np.ones(maps)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training, self.momentum, self.eps)


class ConvLayer:
    """Feed-forward convolution followed by batch normalization and a rectifier."""

    def __init__(self, rng, in_maps: int, out_maps: int, kernel: int, padding: int = 0,
                 momentum: float = 0.1, eps: float = 1e-5):
        fan_in = kernel * kernel * in_maps
        self.weight = Tensor(_uniform_init(rng, (kernel, kernel, in_maps, out_maps), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_maps), requires_grad=True)
        self.padding = padding
        self.bn = BatchNorm(out_maps, momentum, eps)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.bn(conv2d(x, self.weight, self.bias, 1, self.padding), training))

    def parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias,
                "bn.gamma": self.bn.gamma, "bn.beta": self.bn.beta}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"bn.running_mean": self.bn.running_mean, "bn.running_var": self.bn.running_var}


class RclLayer:
    """Recurrent convolutional layer.

    ``z(n) = ff(u) + rec(v(n-1)) + b`` with a 1x1 feed-forward kernel and a
    3x3 recurrent kernel shared over iterations; ``v(0)`` comes from the
    feed-forward path alone. Each iteration has its own batch normalization,
    applied before the rectifier.
    """

    def __init__(self, rng, in_maps: int, maps: int, recurrences: int = 3,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.recurrences = recurrences
        self.w_ff = Tensor(_uniform_init(rng, (1, 1, in_maps, maps), in_maps), requires_grad=True)
        self.w_rec = Tensor(_uniform_init(rng, (3, 3, maps, maps), 9 * maps), requires_grad=True)
        self.bias = Tensor(np.zeros(maps), requires_grad=True)
        self.bns = [BatchNorm(maps, momentum, eps) for _ in range(recurrences + 1)]

    def forward(self, u: Tensor, training: bool, trace: Optional[list] = None) -> Tensor:
        ff = conv2d(u, self.w_ff, self.bias)
        if trace is not None:
            trace.append(ff.data.copy())
        v = relu(self.bns[0](ff, training))
        for n in range(1, self.recurrences + 1):
            z = ff + conv2d(v, self.w_rec, None, 1, 1)
            if trace is not None:
                trace.append(z.data.copy())
            v = relu(self.bns[n](z, training))
        return v

    __call__ = forward

    def parameters(self) -> Dict[str, Tensor]:
        params = {"w_ff": self.w_ff, "bias": self.bias}
        if self.recurrences:
            params["w_rec"] = self.w_rec
        for n, bn in enumerate(self.bns):
            params[f"bn{n}.gamma"] = bn.gamma
            params[f"bn{n}.beta"] = bn.beta
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for n, bn in enumerate(self.bns):
            out[f"bn{n}.running_mean"] = bn.running_mean
            out[f"bn{n}.running_var"] = bn.running_var
        return out


class StrcnNetwork:
    """The full layer stack.

    Slots RCL2..RCL5 hold recurrent layers up to ``rcl_count``; remaining slots
    hold the same layer with zero recurrences (a plain 1x1 convolution with
    batch normalization and rectifier).
    """

    def __init__(self, cfg: StrcnConfig, seed: int = 0):
        self.cfg = cfg
        self.trace = shape_trace(cfg)
        rng = np.random.default_rng(seed)
        m = cfg.feature_maps
        c_in = cfg.input_shape[2]
        self.conv1 = ConvLayer(rng, c_in, m, CONV1_KERNEL, 0, cfg.bn_momentum, cfg.bn_eps)
        self.rcls = [
            RclLayer(rng, m, m, cfg.recurrences if k < cfg.rcl_count else 0,
                     cfg.bn_momentum, cfg.bn_eps)
            for k in range(N_RCL_SLOTS)
        ]
        self.head = Tensor(_uniform_init(rng, (m, cfg.n_classes), m), requires_grad=True)
        self.training = True

    def train(self) -> "StrcnNetwork":
        self.training = True
        return self

    def eval(self) -> "StrcnNetwork":
        self.training = False
        return self

    def features(self, x: Tensor) -> Tensor:
        h = self.conv1(x, self.training)
        for (k, s), rcl in zip(self.cfg.pools, self.rcls):
            h = max_pool2d(h, k, s)
            h = rcl(h, self.training)
        return global_avg_pool(h)

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 3:
            x = Tensor(x.data[None])
        if tuple(x.shape[1:]) != self.cfg.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match {self.cfg.input_shape}")
        return self.features(x) @ self.head

    def forward(self, x) -> Tensor:
        return softmax(self.logits(x))

    def predict(self, x, batch_size: int = 32) -> np.ndarray:
        """Class probabilities in eval mode, one row per sample."""
        was = self.training
        self.eval()
        try:
            x = np.asarray(x, dtype=np.float64)
            if x.ndim == 3:
                x = x[None]
            rows = [self.forward(Tensor(x[i:i + batch_size])).data
                    for i in range(0, len(x), batch_size)]
        finally:
            self.training = was
        return np.concatenate(rows, axis=0)

    # parameters and state ---------------------------------------------------

    def named_parameters(self) -> Dict[str, Tensor]:
        out = {f"conv1.{k}": v for k, v in self.conv1.parameters().items()}
        for i, rcl in enumerate(self.rcls, start=2):
            out.update({f"rcl{i}.{k}": v for k, v in rcl.parameters().items()})
        out["head.weight"] = self.head
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> Dict[str, np.ndarray]:
        out = {f"conv1.{k}": v for k, v in self.conv1.buffers().items()}
        for i, rcl in enumerate(self.rcls, start=2):
            out.update({f"rcl{i}.{k}": v for k, v in rcl.buffers().items()})
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing {sorted(missing)}")
        for k, t in params.items():
            if state[k].shape != t.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.data.shape}")
            t.data[...] = state[k]
        for k, b in buffers.items():
            b[...] = state[k]

    def save(self, path) -> None:
        save_arrays(self.state_dict(), path)

    @classmethod
    def load(cls, path, cfg: StrcnConfig) -> "StrcnNetwork":
        net = cls(cfg)
        net.load_state_dict(load_arrays(path))
        return net


def build_network(cfg: StrcnConfig, seed: int = 0) -> StrcnNetwork:
    return StrcnNetwork(cfg, seed)
