"""Learnable components: shared invariant encoder, energy decoder, and
equivariant structure decoder, plus the parameter-partition and
differentiation contracts every loss relies on.

The encoder consumes only rotation/translation-invariant inputs (atom
types, bond orders, pairwise distances, a sinusoidal step embedding), so
its features are invariant by construction. The structure decoder updates
coordinates along difference vectors scaled by invariant messages, which
makes it rotation-equivariant by construction; translations are handled
by centering input and output.

All parameters and activations are float64.
"""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, NumericError
from .molecule import MoleculeGraph

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    msg_hidden: int = 32
    encoder_layers: int = 4
    decoder_layers: int = 3
    time_dim: int = 64
    rbf_bins: int = 16
    rbf_max: float = 6.0
    n_element_types: int = 8
    max_bond_order: int = 3
    dtype: str = "float64"  # float32 roughly halves training cost on one core

    def __post_init__(self):
        if min(self.hidden_dim, self.msg_hidden, self.encoder_layers,
               self.decoder_layers, self.time_dim, self.rbf_bins) < 1 or self.rbf_max <= 0:
            raise ConfigError("model dimensions must be positive")
        if self.time_dim % 2 != 0:
            raise ConfigError("time_dim must be even")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


class GraphBatch:
    """Padded tensor view of one or more molecular graphs.

    Builds atom-type ids, bond-order ids, an atom mask and a pair mask
    (off-diagonal, real-atom pairs only). Graph featurization is
    coordinate-free, so a batch can be reused across coordinate sets.
    """

    def __init__(self, graphs: list[MoleculeGraph]):
        if not graphs:
            raise DataError("empty graph batch")
        amax = max(g.atom_count for g in graphs)
        b = len(graphs)
        atom_types = torch.zeros((b, amax), dtype=torch.long)
        bond_order = torch.zeros((b, amax, amax), dtype=torch.long)
        mask = torch.zeros((b, amax), dtype=DTYPE)
        for k, g in enumerate(graphs):
            a = g.atom_count
            atom_types[k, :a] = torch.from_numpy(np.asarray(g.atom_types))
            bond_order[k, :a, :a] = torch.from_numpy(g.bond_order_matrix())
            mask[k, :a] = 1.0
        self.graphs = graphs
        self.size = b
        self.max_atoms = amax
        self.atom_types = atom_types
        self.bond_order = bond_order
        self.mask = mask
        pair = mask[:, :, None] * mask[:, None, :]
        eye = torch.eye(amax, dtype=DTYPE).unsqueeze(0)
        self.pair_mask = pair * (1.0 - eye)
        self.n_real = mask.sum(dim=1)
        self._casts: dict = {}

    def masks(self, dtype: torch.dtype):
        """(mask, pair_mask, n_real) in the requested dtype, cached."""
        hit = self._casts.get(dtype)
        if hit is None:
            hit = (self.mask.to(dtype), self.pair_mask.to(dtype), self.n_real.to(dtype))
            self._casts[dtype] = hit
        return hit

    @classmethod
    def single(cls, graph: MoleculeGraph) -> "GraphBatch":
        return cls([graph])

    @classmethod
    def from_padded(cls, atom_types: np.ndarray, bond_order: np.ndarray,
                    mask: np.ndarray) -> "GraphBatch":
        """Fast path from pre-padded integer arrays (training batches)."""
        obj = cls.__new__(cls)
        obj.graphs = None
        obj.size, obj.max_atoms = atom_types.shape
        obj.atom_types = torch.from_numpy(np.ascontiguousarray(atom_types))
        obj.bond_order = torch.from_numpy(np.ascontiguousarray(bond_order))
        obj.mask = torch.from_numpy(np.ascontiguousarray(mask).astype(np.float64))
        pair = obj.mask[:, :, None] * obj.mask[:, None, :]
        eye = torch.eye(obj.max_atoms, dtype=DTYPE).unsqueeze(0)
        obj.pair_mask = pair * (1.0 - eye)
        obj.n_real = obj.mask.sum(dim=1)
        obj._casts = {}
        return obj

    def expand(self, n: int) -> "ExpandedBatch":
        """View a single-graph batch as n identical copies (no tensor copy)."""
        if self.size != 1:
            raise DataError("expand requires a single-graph batch")
        return ExpandedBatch(self, n)


class ExpandedBatch:
    def __init__(self, base: GraphBatch, n: int):
        a = base.max_atoms
        self.size = n
        self.max_atoms = a
        self.atom_types = base.atom_types.expand(n, a)
        self.bond_order = base.bond_order.expand(n, a, a)
        self.mask = base.mask.expand(n, a)
        self.pair_mask = base.pair_mask.expand(n, a, a)
        self.n_real = base.n_real.expand(n)
        self._base = base
        self._n = n

    def masks(self, dtype: torch.dtype):
        mask, pair, n_real = self._base.masks(dtype)
        a = self.max_atoms
        return (mask.expand(self._n, a), pair.expand(self._n, a, a),
                n_real.expand(self._n))


def sinusoidal_time_embedding(t: torch.Tensor, dim: int,
                              dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Sinusoidal step embedding with frequencies geometric in [1, 1e4]."""
    half = dim // 2
    freqs = torch.pow(
        torch.tensor(1e4, dtype=dtype), torch.arange(half, dtype=dtype) / max(half - 1, 1)
    )
    ang = t.to(dtype)[:, None] / freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class RadialBasis(nn.Module):
    """Gaussian distance featurization on [0, rbf_max]."""

    def __init__(self, bins: int, rbf_max: float, dtype: torch.dtype = DTYPE):
        super().__init__()
        centers = torch.linspace(0.0, rbf_max, bins, dtype=dtype)
        spacing = rbf_max / max(bins - 1, 1)
        self.register_buffer("centers", centers)
        self.gamma = 1.0 / (2.0 * spacing * spacing)

    def forward(self, d: torch.Tensor) -> torch.Tensor:
        diff = d.unsqueeze(-1) - self.centers
        return torch.exp(-self.gamma * diff * diff)


def _mlp(sizes: list[int], dtype: torch.dtype = DTYPE) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1], dtype=dtype))
        if i < len(sizes) - 2:
            layers.append(nn.SiLU())
    return nn.Sequential(*layers)


def _pair_distances(coords: torch.Tensor) -> torch.Tensor:
    diff = coords.unsqueeze(2) - coords.unsqueeze(1)
    return torch.sqrt((diff * diff).sum(-1) + 1e-12)


class EdgeBlock(nn.Module):
    """Invariant edge messages z_ij = silu(W_i h_i + W_j h_j + W_p p_ij)
    in a low-dimensional message space, with a scalar gate per edge. The
    first linear is block-factorized over its inputs, which avoids
    materializing the concatenated (B, A, A, 2d+p) tensor."""

    def __init__(self, d: int, pair_dim: int, hidden: int, dtype: torch.dtype = DTYPE):
        super().__init__()
        self.lin_i = nn.Linear(d, hidden, bias=False, dtype=dtype)
        self.lin_j = nn.Linear(d, hidden, bias=False, dtype=dtype)
        self.lin_p = nn.Linear(pair_dim, hidden, dtype=dtype)
        self.gate = nn.Linear(hidden, 1, dtype=dtype)

    def forward(self, h: torch.Tensor, pair_feat: torch.Tensor,
                gate_bias=0.0) -> tuple[torch.Tensor, torch.Tensor]:
        z = torch.nn.functional.silu(
            self.lin_i(h).unsqueeze(2) + self.lin_j(h).unsqueeze(1) + self.lin_p(pair_feat)
        )
        g = torch.sigmoid(self.gate(z) + gate_bias)
        return z, g


class NodeUpdate(nn.Module):
    """Residual node update from the gated-sum edge message."""

    def __init__(self, d: int, hidden: int, dtype: torch.dtype = DTYPE):
        super().__init__()
        self.net = _mlp([d + hidden, d, d], dtype)
        self.norm = nn.LayerNorm(d, dtype=dtype)

    def forward(self, h: torch.Tensor, agg: torch.Tensor) -> torch.Tensor:
        return self.norm(h + self.net(torch.cat([h, agg], dim=-1)))


class InvariantEncoder(nn.Module):
    """Message passing over all atom pairs using distances, bond orders
    and the time embedding; outputs per-atom invariant features."""

    BOND_DIM = 8
    TIME_HEAD = 8

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        dt = cfg.torch_dtype
        self.cfg = cfg
        self.atom_emb = nn.Embedding(cfg.n_element_types, d, dtype=dt)
        self.bond_emb = nn.Embedding(cfg.max_bond_order + 1, self.BOND_DIM, dtype=dt)
        self.rbf = RadialBasis(cfg.rbf_bins, cfg.rbf_max, dt)
        self.time_mlp = _mlp([cfg.time_dim, d, d], dt)
        self.time_q = nn.Linear(d, self.TIME_HEAD, dtype=dt)
        self.time_k = nn.Linear(d, self.TIME_HEAD, dtype=dt)
        pair_in = cfg.rbf_bins + self.BOND_DIM
        self.edge = nn.ModuleList(
            [EdgeBlock(d, pair_in, cfg.msg_hidden, dt) for _ in range(cfg.encoder_layers)]
        )
        self.upd = nn.ModuleList(
            [NodeUpdate(d, cfg.msg_hidden, dt) for _ in range(cfg.encoder_layers)]
        )

    def forward(self, batch, coords: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        dt = self.cfg.torch_dtype
        coords = coords.to(dt)
        mask, pair_mask, n_real = batch.masks(dt)
        temb = self.time_mlp(sinusoidal_time_embedding(t, self.cfg.time_dim, dt))
        # scalar per-molecule bias mixing time into pairwise message gates
        tbias = (self.time_q(temb) * self.time_k(temb)).sum(-1)[:, None, None, None]
        h = self.atom_emb(batch.atom_types) + temb[:, None, :]
        dist = _pair_distances(coords)
        pair_feat = torch.cat([self.rbf(dist), self.bond_emb(batch.bond_order)], dim=-1)
        denom = (n_real - 1.0).clamp(min=1.0)[:, None, None]
        pmask = pair_mask.unsqueeze(-1)
        for edge, upd in zip(self.edge, self.upd):
            z, g = edge(h, pair_feat, tbias)
            agg = (z * g * pmask).sum(dim=2) / denom
            h = upd(h, agg)
        return h * mask.unsqueeze(-1)


class EnergyHead(nn.Module):
    """Sum-pooled node features through a small feed-forward map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.net = _mlp([d, d, 1], cfg.torch_dtype)

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        pooled = (h * mask.to(h.dtype).unsqueeze(-1)).sum(dim=1)
        return self.net(pooled).squeeze(-1)


class EquivariantDecoder(nn.Module):
    """Coordinate-update message passing: invariant messages scale
    displacement vectors (x_i - x_j). Update weights and the final global
    scale gate are zero-initialized, so the untrained decoder is the
    identity on centered coordinates."""

    BOND_DIM = 8

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        dt = cfg.torch_dtype
        self.cfg = cfg
        self.in_lin = nn.Linear(d, d, dtype=dt)
        self.bond_emb = nn.Embedding(cfg.max_bond_order + 1, self.BOND_DIM, dtype=dt)
        self.rbf = RadialBasis(cfg.rbf_bins, cfg.rbf_max, dt)
        pair_in = cfg.rbf_bins + self.BOND_DIM
        self.edge = nn.ModuleList(
            [EdgeBlock(d, pair_in, cfg.msg_hidden, dt) for _ in range(cfg.decoder_layers)]
        )
        self.coord = nn.ModuleList(
            [nn.Linear(cfg.msg_hidden, 1, dtype=dt) for _ in range(cfg.decoder_layers)]
        )
        self.upd = nn.ModuleList(
            [NodeUpdate(d, cfg.msg_hidden, dt) for _ in range(cfg.decoder_layers)]
        )
        self.scale = nn.Linear(d, 1, dtype=dt)
        for lin in self.coord:
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        nn.init.zeros_(self.scale.weight)
        nn.init.zeros_(self.scale.bias)

    def forward(self, h: torch.Tensor, coords: torch.Tensor, batch) -> torch.Tensor:
        dt = self.cfg.torch_dtype
        s = self.in_lin(h)
        x = coords.to(dt)
        mask, pair_mask, n_real = batch.masks(dt)
        amask = mask.unsqueeze(-1)
        pmask = pair_mask.unsqueeze(-1)
        denom = (n_real - 1.0).clamp(min=1.0)[:, None, None]
        bond_feat = self.bond_emb(batch.bond_order)
        for edge, coord, upd in zip(self.edge, self.coord, self.upd):
            diff = (x.unsqueeze(2) - x.unsqueeze(1)) * pmask
            dist = torch.sqrt((diff * diff).sum(-1) + 1e-12)
            pair_feat = torch.cat([self.rbf(dist), bond_feat], dim=-1)
            z, g = edge(s, pair_feat)
            w = coord(z) * g * pmask
            x = x + (diff * w).sum(dim=2) / denom
            agg = (z * g * pmask).sum(dim=2) / denom
            s = upd(s, agg)
        pooled = (s * amask).sum(dim=1) / n_real[:, None]
        gain = 1.0 + self.scale(pooled)[:, None, :]
        x = x * gain
        return _masked_center(x, mask)


def _masked_center(coords: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    w = mask.unsqueeze(-1)
    mean = (coords * w).sum(dim=1, keepdim=True) / w.sum(dim=1, keepdim=True)
    return (coords - mean) * w


@dataclass(frozen=True)
class ParameterPartition:
    """Disjoint named-parameter sets: shared encoder, energy decoder,
    structure decoder. Every trainable parameter belongs to exactly one."""

    encoder: dict[str, torch.Tensor]
    energy: dict[str, torch.Tensor]
    structure: dict[str, torch.Tensor]

    def __post_init__(self):
        names = [set(self.encoder), set(self.energy), set(self.structure)]
        for a in range(3):
            for b in range(a + 1, 3):
                overlap = names[a] & names[b]
                if overlap:
                    raise ConfigError(f"parameter sets overlap: {sorted(overlap)[:3]}")

    def group(self, key: str) -> dict[str, torch.Tensor]:
        try:
            return getattr(self, key)
        except AttributeError:
            raise ConfigError(f"unknown parameter group {key!r}") from None

    def all_names(self) -> set[str]:
        return set(self.encoder) | set(self.energy) | set(self.structure)


PARAM_GROUPS = ("encoder", "energy", "structure")


class JointModel(nn.Module):
    """Shared encoder + energy head + structure decoder (Eq.-style
    composition: E = D_E(enc(R, t=0)), S_t = D_S(enc(R, t), R))."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = InvariantEncoder(cfg)
        self.energy_head = EnergyHead(cfg)
        self.structure_decoder = EquivariantDecoder(cfg)
        self.partition()  # disjointness is machine-checked at construction

    @property
    def dtype(self) -> torch.dtype:
        return self.cfg.torch_dtype

    # -- batched torch API -------------------------------------------------

    def encode_batch(self, batch, coords: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.encoder(batch, coords, t)

    def energy_batch(self, batch, coords: torch.Tensor) -> torch.Tensor:
        t0 = torch.zeros(coords.shape[0], dtype=torch.long)
        h = self.encoder(batch, coords, t0)
        return self.energy_head(h, batch.masks(self.dtype)[0])

    def denoise_batch(
        self, batch, coords: torch.Tensor, t: torch.Tensor, detach_features: bool = False
    ) -> torch.Tensor:
        mask = batch.masks(self.dtype)[0]
        xc = _masked_center(coords.to(self.dtype), mask)
        h = self.encoder(batch, xc, t)
        if detach_features:
            h = h.detach()
        return self.structure_decoder(h, xc, batch)

    # -- single-molecule numpy convenience ----------------------------------

    def encode(self, graph: MoleculeGraph, coords: np.ndarray, t: int) -> np.ndarray:
        batch = GraphBatch.single(graph)
        with torch.no_grad():
            h = self.encode_batch(
                batch, _coords_tensor(coords, self.dtype)[None], torch.tensor([int(t)])
            )
        return h[0].double().numpy()

    def energy(self, graph: MoleculeGraph, coords: np.ndarray) -> float:
        batch = GraphBatch.single(graph)
        with torch.no_grad():
            e = self.energy_batch(batch, _coords_tensor(coords, self.dtype)[None])
        return float(e[0])

    def energy_input_gradient(self, graph: MoleculeGraph, coords: np.ndarray) -> np.ndarray:
        batch = GraphBatch.single(graph)
        x = _coords_tensor(coords, self.dtype)[None].requires_grad_(True)
        e = self.energy_batch(batch, x)
        (grad,) = torch.autograd.grad(e.sum(), x)
        return grad[0].double().numpy()

    def denoise(self, graph: MoleculeGraph, coords: np.ndarray, t: int) -> np.ndarray:
        batch = GraphBatch.single(graph)
        with torch.no_grad():
            out = self.denoise_batch(
                batch, _coords_tensor(coords, self.dtype)[None], torch.tensor([int(t)])
            )
        return out[0].double().numpy()

    def as_denoiser(self):
        """Adapter to the sampler protocol: model(graph, x, t) with x of
        shape (n, A, 3) in numpy, evaluated without gradients."""
        cache: dict[int, GraphBatch] = {}

        def fn(graph: MoleculeGraph, x: np.ndarray, t: int) -> np.ndarray:
            base = cache.get(id(graph))
            if base is None:
                base = GraphBatch.single(graph)
                cache[id(graph)] = base
            x = np.asarray(x, dtype=np.float64)
            squeeze = x.ndim == 2
            if squeeze:
                x = x[None]
            batch = base.expand(x.shape[0])
            tt = torch.full((x.shape[0],), int(t), dtype=torch.long)
            with torch.no_grad():
                out = self.denoise_batch(batch, torch.from_numpy(x).to(self.dtype), tt)
            out = out.double().numpy()
            return out[0] if squeeze else out

        return fn

    # -- parameter bookkeeping ----------------------------------------------

    def partition(self) -> ParameterPartition:
        groups: dict[str, dict[str, torch.Tensor]] = {g: {} for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            if name.startswith("encoder."):
                groups["encoder"][name] = p
            elif name.startswith("energy_head."):
                groups["energy"][name] = p
            elif name.startswith("structure_decoder."):
                groups["structure"][name] = p
            else:
                raise ConfigError(f"parameter {name!r} belongs to no partition set")
        return ParameterPartition(groups["encoder"], groups["energy"], groups["structure"])


def _coords_tensor(coords: np.ndarray, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    arr = np.asarray(coords, dtype=np.float64)
    return torch.from_numpy(arr.copy()).to(dtype)


def parameter_gradients(
    loss: torch.Tensor, partition: ParameterPartition, mask: set[str]
) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss restricted to the masked parameter sets.

    Unmasked parameters receive no gradient entry, so an optimizer step
    built from the result cannot touch them. Parameters that do not
    participate in the loss graph get zero gradients.
    """
    if not torch.isfinite(loss):
        raise NumericError(f"loss is non-finite: {float(loss)}")
    bad = set(mask) - set(PARAM_GROUPS)
    if bad:
        raise ConfigError(f"unknown parameter groups in mask: {sorted(bad)}")
    names: list[str] = []
    params: list[torch.Tensor] = []
    for key in PARAM_GROUPS:
        if key in mask:
            for name, p in partition.group(key).items():
                names.append(name)
                params.append(p)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for name, p, g in zip(names, params, grads)
    }


class frozen_params:
    """Context manager flipping requires_grad off for parameter groups so
    a forward pass records them as constants (input gradients still flow)."""

    def __init__(self, partition: ParameterPartition, groups: set[str]):
        self.params = []
        for key in groups:
            self.params.extend(partition.group(key).values())
        self.saved: list[bool] = []

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad_(False)
        return self

    def __exit__(self, *exc):
        for p, flag in zip(self.params, self.saved):
            p.requires_grad_(flag)
        return False


# -- checkpoint container ----------------------------------------------------

CHECKPOINT_VERSION = 1


def _tensor_to_entry(t: torch.Tensor) -> dict:
    arr = t.detach().numpy().astype(np.float64)
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes(order="C")).decode("ascii"),
    }


def _entry_to_tensor(entry: dict) -> torch.Tensor:
    raw = base64.b64decode(entry["data"])
    arr = np.frombuffer(raw, dtype=np.float64).reshape(entry["shape"]).copy()
    return torch.from_numpy(arr)


def checkpoint_payload(model: JointModel, schedule_meta: dict, config_hash: str,
                       extra: dict | None = None) -> dict:
    params = {
        name: _tensor_to_entry(p)
        for name, p in sorted(model.state_dict().items())
    }
    return {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "model_config": asdict(model.cfg),
        "schedule": schedule_meta,
        "extra": extra or {},
        "params": params,
    }


def save_checkpoint(model: JointModel, path, schedule_meta: dict, config_hash: str,
                    extra: dict | None = None) -> None:
    payload = checkpoint_payload(model, schedule_meta, config_hash, extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path) -> tuple[JointModel, dict]:
    """Rebuild a JointModel from a checkpoint file; returns (model, meta)
    where meta holds config_hash, schedule and extra entries."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"malformed checkpoint {path}: {e}") from None
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig(**payload["model_config"])
    model = JointModel(cfg)
    state = {name: _entry_to_tensor(entry) for name, entry in payload["params"].items()}
    model.load_state_dict(state)
    meta = {
        "config_hash": payload["config_hash"],
        "schedule": payload["schedule"],
        "extra": payload["extra"],
    }
    return model, meta


def state_hash(tensors: dict[str, torch.Tensor]) -> str:
    """SHA-256 over raw tensor bytes in name order; used for the
    frozen-parameter spot checks."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().numpy().tobytes(order="C"))
    return h.hexdigest()
