"""Actor/critic trunks for the shared segment policy.

Three trunk families read a ``(3, 8, W)`` recentered view:

* ``FC``     - plain fully connected layers on the flattened view.
* ``GI_NN``  - the same FC layers applied to the view and to its flip, with
  the two activations summed after the nonlinearity.
* ``GI_CNN`` - the orbit {view, flip(view)} goes through one shared 3x3
  kernel bank (zero padding, kernels never flipped); the orbit is summed,
  spatially averaged, and passed through one dense layer.

Both GI trunks are exactly invariant under :func:`flip_observation`.  The
policy head is a tanh-squashed Gaussian mean with a state-independent,
learnable log standard deviation; the critic is a separately parameterised
copy of the trunk with a linear value head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import gradcore as gc
from .gradcore import DimensionError, Tensor

TRUNK_KINDS = ("FC", "GI_NN", "GI_CNN")
FLIP_MODES = ("physical", "naive")
LOG_STD_BOUNDS = (-5.0, 2.0)

CHECKPOINT_MAGIC = b"RBCPOL\x00\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    trunk_kind: str = "FC"
    hidden_width: int = 512
    hidden_layers: int = 2
    conv_kernels: int = 1024
    cnn_hidden: int = 384
    flip_mode: str = "physical"
    activation: str = "tanh"
    ginn_half_scale: bool = False
    init_log_std: float = -0.5
    obs_shape: tuple[int, int, int] = (3, 8, 32)

    def __post_init__(self):
        if self.trunk_kind not in TRUNK_KINDS:
            raise ValueError(f"trunk_kind must be one of {TRUNK_KINDS}, got {self.trunk_kind!r}")
        if self.flip_mode not in FLIP_MODES:
            raise ValueError(f"flip_mode must be one of {FLIP_MODES}, got {self.flip_mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.hidden_width, self.hidden_layers, self.conv_kernels, self.cnn_hidden) < 1:
            raise ValueError("layer sizes must be positive")
        object.__setattr__(self, "obs_shape", tuple(int(n) for n in self.obs_shape))

    @property
    def n_features(self) -> int:
        c, h, w = self.obs_shape
        return c * h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obs_shape"] = list(self.obs_shape)
        return d


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"tanh": gc.tanh, "softplus": gc.softplus}


# ---------------------------------------------------------------------------
# symmetry


def flip_signs(flip_mode: str, n_channels: int = 3) -> np.ndarray:
    signs = np.ones(n_channels)
    if flip_mode == "physical":
        signs[1] = -1.0  # horizontal velocity changes sign under reflection
    return signs


def flip_observation(obs: np.ndarray, flip_mode: str = "physical") -> np.ndarray:
    """Reflect the view about its centre column W/2 (periodic: q -> -q mod W).

    In ``physical`` mode the u channel is also negated.  Involution.
    """
    obs = np.asarray(obs, dtype=np.float64)
    out = np.roll(obs[..., ::-1], 1, axis=-1)
    return out * flip_signs(flip_mode, obs.shape[-3]).reshape(-1, 1, 1)


def flip_tensor(x: Tensor, flip_mode: str) -> Tensor:
    """Differentiable :func:`flip_observation` for ``(..., C, H, W)`` tensors."""
    return gc.roll(gc.reverse_width(x, flip_signs(flip_mode, x.shape[-3])), 1, axis=-1)


# ---------------------------------------------------------------------------
# parameters


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _trunk_layout(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    """(name, shape) of the trunk weights, in order; biases follow each weight."""
    if spec.trunk_kind == "GI_CNN":
        c = spec.obs_shape[0]
        return [
            ("conv", (spec.conv_kernels, c, 3, 3)),
            ("dense", (spec.conv_kernels, spec.cnn_hidden)),
        ]
    sizes = [spec.n_features] + [spec.hidden_width] * spec.hidden_layers
    return [(f"fc{i}", (sizes[i], sizes[i + 1])) for i in range(spec.hidden_layers)]


def trunk_output_width(spec: NetworkSpec) -> int:
    return spec.cnn_hidden if spec.trunk_kind == "GI_CNN" else spec.hidden_width


class PolicyNet:
    """Actor and critic parameters plus the forward pass for one trunk kind."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.spec = spec
        self.seed = seed
        self.params = params if params is not None else self._init_params(seed)

    # -- construction ----------------------------------------------------

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        width = trunk_output_width(self.spec)
        for prefix in ("pi", "vf"):
            for name, shape in _trunk_layout(self.spec):
                out.append((f"{prefix}.{name}.w", shape))
                bias = shape[0] if name == "conv" else shape[1]
                out.append((f"{prefix}.{name}.b", (bias,)))
        out += [
            ("pi.head.w", (width, 1)),
            ("pi.head.b", (1,)),
            ("pi.log_std", (1,)),
            ("vf.head.w", (width, 1)),
            ("vf.head.b", (1,)),
        ]
        return out

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in self.layout():
            if name == "pi.log_std":
                value = np.full(shape, self.spec.init_log_std)
            elif name.endswith(".b"):
                value = np.zeros(shape)
            elif name == "pi.head.w":
                value = _orthogonal(rng, shape[0], shape[1], 0.01)
            elif name == "vf.head.w":
                value = _orthogonal(rng, shape[0], shape[1], 1.0)
            elif len(shape) == 4:
                fan = shape[1] * 9
                value = _orthogonal(rng, shape[0], fan, np.sqrt(2.0)).reshape(shape)
            else:
                value = _orthogonal(rng, shape[0], shape[1], np.sqrt(2.0))
            params[name] = Tensor(value, requires_grad=True)
        return params

    def randomize(self, rng: np.random.Generator, bias_scale: float = 0.1) -> PolicyNet:
        """Draw every parameter at random (fan-in scaled); used by property checks."""
        for name, p in self.params.items():
            if name.endswith(".b"):
                p.values = bias_scale * rng.normal(size=p.shape)
            elif name == "pi.log_std":
                p.values = rng.uniform(-1.0, 0.5, size=p.shape)
            else:
                fan = int(np.prod(p.shape[1:])) if p.values.ndim == 4 else p.shape[0]
                p.values = rng.normal(size=p.shape) / np.sqrt(fan)
        return self

    def clone(self) -> PolicyNet:
        return PolicyNet(
            self.spec,
            self.seed,
            {k: Tensor(v.values.copy(), requires_grad=True) for k, v in self.params.items()},
        )

    def parameters(self, prefix: str | None = None) -> list[Tensor]:
        return [p for k, p in self.params.items() if prefix is None or k.startswith(prefix)]

    def names(self, prefix: str | None = None) -> list[str]:
        return [k for k in self.params if prefix is None or k.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def flat(self) -> np.ndarray:
        return np.concatenate([p.values.reshape(-1) for p in self.params.values()])

    # -- forward ---------------------------------------------------------

    def _act(self, x: Tensor) -> Tensor:
        return ACTIVATIONS[self.spec.activation](x)

    def _fc_branch(self, prefix: str, x: Tensor) -> Tensor:
        h = x
        for name, _ in _trunk_layout(self.spec):
            h = self._act(gc.add_bias(gc.matmul(h, self.params[f"{prefix}.{name}.w"]), self.params[f"{prefix}.{name}.b"]))
        return h

    def conv_features(self, prefix: str, x: Tensor) -> Tensor:
        """Pre-reduction GI-CNN feature maps, shape (2, B, K, H, W): [view, flip(view)]."""
        b = x.shape[0]
        orbit = gc.concat([x, flip_tensor(x, self.spec.flip_mode)], axis=0)
        z = gc.conv2d_zero_pad(orbit, self.params[f"{prefix}.conv.w"])
        k, h, w = z.shape[1:]
        bias = gc.reshape(
            gc.broadcast_to(gc.reshape(self.params[f"{prefix}.conv.b"], (k, 1, 1)), (k, h, w)),
            (k * h * w,),
        )
        z = gc.reshape(gc.add_bias(gc.reshape(z, (2 * b, k * h * w)), bias), (2, b, k, h, w))
        return self._act(z)

    def trunk(self, prefix: str, obs: Tensor) -> Tensor:
        """Features (B, width) for a batch of views (B, C, H, W)."""
        kind = self.spec.trunk_kind
        b = obs.shape[0]
        if kind == "FC":
            return self._fc_branch(prefix, gc.reshape(obs, (b, -1)))
        if kind == "GI_NN":
            both = gc.concat([obs, flip_tensor(obs, self.spec.flip_mode)], axis=0)
            h = self._fc_branch(prefix, gc.reshape(both, (2 * b, -1)))
            width = h.shape[1]
            h = gc.reshape(h, (2, b, width))
            out = gc.sum(h, axis=0)
            return gc.scale(out, 0.5) if self.spec.ginn_half_scale else out
        feats = self.conv_features(prefix, obs)
        pooled = gc.mean(gc.sum(feats, axis=0), axis=(2, 3))  # (B, K)
        dense_w, dense_b = self.params[f"{prefix}.dense.w"], self.params[f"{prefix}.dense.b"]
        return self._act(gc.add_bias(gc.matmul(pooled, dense_w), dense_b))

    def forward(self, obs) -> tuple[Tensor, Tensor, Tensor]:
        """Return (action mean in [-1, 1], log std, value), each of shape (B,)."""
        obs = obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, dtype=np.float64))
        if obs.values.ndim == 3:
            obs = gc.reshape(obs, (1,) + obs.shape)
        if tuple(obs.shape[1:]) != self.spec.obs_shape:
            raise DimensionError(f"expected views of shape {self.spec.obs_shape}, got {obs.shape[1:]}")
        b = obs.shape[0]
        p = self.params
        hp = self.trunk("pi", obs)
        mean = gc.tanh(gc.reshape(gc.add_bias(gc.matmul(hp, p["pi.head.w"]), p["pi.head.b"]), (b,)))
        log_std = gc.broadcast_to(gc.clip_by_value(p["pi.log_std"], *LOG_STD_BOUNDS), (b,))
        hv = self.trunk("vf", obs)
        value = gc.reshape(gc.add_bias(gc.matmul(hv, p["vf.head.w"]), p["vf.head.b"]), (b,))
        return mean, log_std, value

    def evaluate(self, obs) -> PolicyOutput:
        """Graph-free forward pass."""
        frozen = {k: Tensor(v.values) for k, v in self.params.items()}
        mean, log_std, value = PolicyNet(self.spec, self.seed, frozen).forward(obs)
        return PolicyOutput(mean.values, np.exp(log_std.values), value.values, log_std.values)


def forward_fc(net: PolicyNet, obs) -> PolicyOutput:
    assert net.spec.trunk_kind == "FC"
    return net.evaluate(obs)


def forward_ginn(net: PolicyNet, obs) -> PolicyOutput:
    assert net.spec.trunk_kind == "GI_NN"
    return net.evaluate(obs)


def forward_gicnn(net: PolicyNet, obs) -> PolicyOutput:
    assert net.spec.trunk_kind == "GI_CNN"
    return net.evaluate(obs)


@dataclass
class PolicyOutput:
    mean: np.ndarray
    std: np.ndarray
    value: np.ndarray
    log_std: np.ndarray | None = None  # exact network output; log(std) can differ in the last bit


class PEPolicy:
    """Policy that adds the positional encoding to a global observation first.

    ``forward(obs, agent_index)`` encodes the global image, recenters it for
    the agent, and runs the wrapped network; without an agent index the
    encoded image is passed on as is.
    """

    def __init__(self, net: PolicyNet, env_cfg, domain_width: float):
        from . import marl_env

        self.net = net
        self.env_cfg = env_cfg
        self.domain_width = domain_width
        self._env = marl_env

    @property
    def spec(self) -> NetworkSpec:
        return self.net.spec

    def prepare(self, obs: np.ndarray, agent_index: int | None = None) -> np.ndarray:
        x = self._env.inject_positional_encoding(obs, self.env_cfg, self.domain_width)
        return x if agent_index is None else self._env.recenter(x, agent_index, self.env_cfg)

    def evaluate(self, obs: np.ndarray, agent_index: int | None = None) -> PolicyOutput:
        return self.net.evaluate(self.prepare(obs, agent_index))


def wrap_pe(net: PolicyNet, env_cfg, domain_width: float) -> PEPolicy:
    return PEPolicy(net, env_cfg, domain_width)


# ---------------------------------------------------------------------------
# acting


def act(output: PolicyOutput, mode: str, rng: np.random.Generator | None = None):
    """Pick actions from a policy output.

    Returns ``(action, sample, log_prob)``.  In stochastic mode ``sample`` is
    the Gaussian draw, ``log_prob`` its density (before clipping) and
    ``action`` the draw clipped to [-1, 1].  In deterministic mode the action
    is the mean and ``log_prob`` is ``None``.
    """
    mean = np.asarray(output.mean, dtype=np.float64)
    if mode == "deterministic":
        return mean.copy(), mean.copy(), None
    if mode != "stochastic":
        raise ValueError(f"mode must be 'stochastic' or 'deterministic', got {mode!r}")
    if rng is None:
        raise ValueError("stochastic mode needs a random generator")
    std = np.asarray(output.std, dtype=np.float64)
    sample = mean + std * rng.standard_normal(mean.shape)
    log_std = np.log(std) if output.log_std is None else output.log_std
    log_prob = gc.gaussian_logpdf(sample, mean, log_std).values
    return np.clip(sample, -1.0, 1.0), sample, log_prob


# ---------------------------------------------------------------------------
# counting


def parameter_count(net: PolicyNet | None) -> dict:
    """Trainable scalar counts: total, per layer, and the single-trunk weight count.

    ``trunk_weights`` counts one (actor) trunk's weight matrices/kernels,
    excluding biases and heads.
    """
    if net is None:
        return {"total": 0, "layers": {}, "trunk_weights": 0}
    layers = {name: int(np.prod(shape)) for name, shape in net.layout()}
    trunk = sum(int(np.prod(s)) for _, s in _trunk_layout(net.spec))
    return {"total": sum(layers.values()), "layers": layers, "trunk_weights": trunk}


def format_count_report(net: PolicyNet, target: int | None = None) -> str:
    info = parameter_count(net)
    lines = [f"trunk kind {net.spec.trunk_kind}"]
    for name, n in info["layers"].items():
        lines.append(f"  {name:<14s} {n:>10,d}")
    lines.append(f"  total          {info['total']:>10,d}")
    line = f"  trunk weights  {info['trunk_weights']:>10,d}"
    if target is not None:
        line += f"   (target {target:,d}, {'match' if target == info['trunk_weights'] else 'differs'})"
    lines.append(line)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: PolicyNet, path: str | Path) -> None:
    index = []
    offset = 0
    for name, p in net.params.items():
        index.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.size
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "spec": net.spec.to_dict(), "seed": net.seed, "index": index},
        sort_keys=True,
    ).encode()
    payload = np.concatenate([p.values.reshape(-1) for p in net.params.values()]).astype("<f8")
    blob = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + payload.tobytes()
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> PolicyNet:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a policy checkpoint")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    spec_d = dict(header["spec"])
    spec_d["obs_shape"] = tuple(spec_d["obs_shape"])
    spec = NetworkSpec(**spec_d)
    payload = np.frombuffer(raw, dtype="<f8", offset=16 + hlen)
    params = {}
    for entry in header["index"]:
        n = int(np.prod(entry["shape"]))
        chunk = payload[entry["offset"] : entry["offset"] + n]
        if chunk.size != n:
            raise CheckpointError(f"{path}: payload truncated in {entry['name']}")
        params[entry["name"]] = Tensor(chunk.reshape(entry["shape"]).astype(np.float64), requires_grad=True)
    net = PolicyNet(spec, header["seed"], params)
    if [n for n, _ in net.layout()] != list(params):
        raise CheckpointError(f"{path}: layer index does not match spec")
    return net
