"""Neural bundle map: geometry encoder, per-field encoders, cross-field
attention and point-query decoders.

All tensors are rank <= 3 with layout (batch, tokens/points, features).
Pack mode folds cells into the batch axis for the encoders and decoders and
unfolds them into the token axis for attention.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet
from .geom import FIELDS, LABELS, DiscreteDomain, PointCloud
from .refsolver import DEFAULT_DT, FiberState, Trajectory

GROUPS = {
    "geometry": ("geo.",),
    "field_encoders": ("enc.",),
    "encoders": ("geo.", "enc."),
    "attention": ("attn.",),
    "decoders": ("dec.",),
}


class RolloutDivergence(RuntimeError):
    def __init__(self, step: int, trajectory: Trajectory | None = None):
        super().__init__(f"non-finite prediction at step {step}")
        self.step = step
        self.trajectory = trajectory


@dataclass(frozen=True)
class NbmConfig:
    d_geo: int = 16
    d_field: int = 32
    d_key: int = 32
    geo_hidden: int = 32
    geo_layers: int = 2
    enc_hidden: int = 32
    enc_layers: int = 2
    dec_hidden: int = 32
    dec_layers: int = 2
    fields: tuple[str, ...] = FIELDS
    dt: float = DEFAULT_DT
    coord_gain: float = 10.0  # init std multiplier for the (x, y) input weights

    def __post_init__(self):
        for k, v in asdict(self).items():
            if isinstance(v, int) and v < 1:
                raise ValueError(f"{k} must be >= 1, got {v}")
        if not self.coord_gain > 0:
            raise ValueError("coord_gain must be positive")
        if tuple(self.fields) != FIELDS:
            raise ValueError(f"field list {self.fields} does not match {FIELDS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fields"] = list(self.fields)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NbmConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if "fields" in d:
            d["fields"] = tuple(d["fields"])
        return cls(**d)


@dataclass
class Normalization:
    mean: dict[str, float] = field(default_factory=lambda: {f: 0.0 for f in FIELDS})
    scale: dict[str, float] = field(default_factory=lambda: {f: 1.0 for f in FIELDS})

    def __post_init__(self):
        for f in FIELDS:
            if not self.scale[f] > 0:
                raise ValueError(f"normalization scale for {f} must be positive")

    def forward(self, f: str, u: np.ndarray) -> np.ndarray:
        return (u - self.mean[f]) / self.scale[f]

    def inverse(self, f: str, u: np.ndarray) -> np.ndarray:
        return u * self.scale[f] + self.mean[f]


def _mlp_shapes(prefix: str, d_in: int, hidden: int, layers: int, d_out: int) -> dict[str, tuple]:
    shapes, d = {}, d_in
    for k in range(layers):
        shapes[f"{prefix}.w{k}"] = (d, hidden)
        shapes[f"{prefix}.b{k}"] = (hidden,)
        d = hidden
    shapes[f"{prefix}.wout"] = (d, d_out)
    shapes[f"{prefix}.bout"] = (d_out,)
    return shapes


def param_shapes(cfg: NbmConfig) -> dict[str, tuple]:
    n_lab = len(LABELS)
    s: dict[str, tuple] = {}
    s.update(_mlp_shapes("geo.point", 2 + n_lab, cfg.geo_hidden, cfg.geo_layers, cfg.geo_hidden))
    s.update(_mlp_shapes("geo.head", cfg.geo_hidden, cfg.geo_hidden, 1, cfg.d_geo))
    d_tok = cfg.d_geo + cfg.d_field
    for f in cfg.fields:
        # first layer split into coordinate and value parts
        s[f"enc.{f}.wxy"] = (2, cfg.enc_hidden)
        s[f"enc.{f}.wu"] = (1, cfg.enc_hidden)
        s[f"enc.{f}.b0"] = (cfg.enc_hidden,)
        for k in range(1, cfg.enc_layers):
            s[f"enc.{f}.w{k}"] = (cfg.enc_hidden, cfg.enc_hidden)
            s[f"enc.{f}.b{k}"] = (cfg.enc_hidden,)
        s[f"enc.{f}.wout"] = (cfg.enc_hidden, cfg.d_field)
        s[f"enc.{f}.bout"] = (cfg.d_field,)
    for f in cfg.fields:
        for m in ("wq", "wk", "wv"):
            s[f"attn.{f}.{m}"] = (d_tok, cfg.d_key)
    for f in cfg.fields:
        s[f"dec.{f}.wxy"] = (2, cfg.dec_hidden)
        s[f"dec.{f}.wc"] = (cfg.d_key, cfg.dec_hidden)
        s[f"dec.{f}.b0"] = (cfg.dec_hidden,)
        for k in range(1, cfg.dec_layers):
            s[f"dec.{f}.w{k}"] = (cfg.dec_hidden, cfg.dec_hidden)
            s[f"dec.{f}.b{k}"] = (cfg.dec_hidden,)
        s[f"dec.{f}.wout"] = (cfg.dec_hidden, 1)
        s[f"dec.{f}.bout"] = (1,)
    return s


def _fan_in(name: str, shape: tuple, cfg: NbmConfig) -> int:
    # split first layers share the fan-in of the concatenated input
    if name.startswith("enc.") and (name.endswith(".wxy") or name.endswith(".wu")):
        return 3
    if name.startswith("dec.") and (name.endswith(".wxy") or name.endswith(".wc")):
        return 2 + cfg.d_key
    return shape[0]


class NbmModel:
    def __init__(
        self,
        config: NbmConfig | None = None,
        params: ParamSet | None = None,
        norm: Normalization | None = None,
    ):
        self.config = config or NbmConfig()
        self.norm = norm or Normalization()
        self.params = params if params is not None else ParamSet()
        shapes = param_shapes(self.config)
        if params is not None:
            if set(params.names()) != set(shapes):
                raise ValueError("parameter names do not match the configuration")
            for k, shp in shapes.items():
                if params[k].shape != shp:
                    raise ValueError(f"{k}: shape {params[k].shape}, expected {shp}")

    @classmethod
    def initialize(cls, config: NbmConfig | None = None, seed: int = 0, zero_decoder_head: bool = False):
        cfg = config or NbmConfig()
        rng = np.random.default_rng(seed)
        ps = ParamSet()
        for name, shp in param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[1]
            if leaf.startswith("b"):
                val = np.zeros(shp)
            elif zero_decoder_head and name.startswith("dec.") and leaf == "wout":
                val = np.zeros(shp)
            else:
                std = 1.0 / math.sqrt(_fan_in(name, shp, cfg))
                if leaf == "wxy":
                    std *= cfg.coord_gain
                val = rng.normal(0.0, std, size=shp)
            ps.add(name, val)
        return cls(cfg, ps)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def group_names(self, group: str) -> list[str]:
        if group not in GROUPS:
            raise KeyError(f"unknown parameter group {group!r}; known: {sorted(GROUPS)}")
        return [n for n in self.params.names() if n.startswith(GROUPS[group])]

    def copy(self) -> "NbmModel":
        return NbmModel(
            self.config,
            self.params.copy(),
            Normalization(dict(self.norm.mean), dict(self.norm.scale)),
        )


# --------------------------------------------------------------------------- building blocks
#
# Every block takes an ``ops`` backend: ``ad.recorded`` builds a tape for
# training, ``ad.raw`` runs the identical arithmetic on bare arrays.


def _hidden_stack(model: NbmModel, prefix: str, x, start: int, layers: int, ops):
    P = model.params
    for k in range(start, layers):
        x = ops.tanh(ops.affine(x, ops.param(P, f"{prefix}.w{k}"), ops.param(P, f"{prefix}.b{k}")))
    return x


def encode_geometry_batch(model: NbmModel, cloud_features, ops=ad.recorded):
    """(B, Ng, 2+labels) -> unit-norm (B, 1, d_geo)."""
    cfg, P = model.config, model.params
    x = _hidden_stack(model, "geo.point", cloud_features, 0, cfg.geo_layers, ops)
    x = ops.affine(x, ops.param(P, "geo.point.wout"), ops.param(P, "geo.point.bout"))
    pooled = ops.mean(x, axis=1)  # (B, hidden)
    h = ops.tanh(ops.affine(pooled, ops.param(P, "geo.head.w0"), ops.param(P, "geo.head.b0")))
    z = ops.affine(h, ops.param(P, "geo.head.wout"), ops.param(P, "geo.head.bout"))
    z = ops.l2_normalize(z, axis=-1)
    return ops.reshape(z, (z.shape[0], 1, z.shape[1]))


def encoder_coord_term(model: NbmModel, f: str, coords, ops=ad.recorded):
    P = model.params
    return ops.affine(coords, ops.param(P, f"enc.{f}.wxy"), ops.param(P, f"enc.{f}.b0"))


def decoder_coord_term(model: NbmModel, f: str, coords, ops=ad.recorded):
    P = model.params
    return ops.affine(coords, ops.param(P, f"dec.{f}.wxy"), ops.param(P, f"dec.{f}.b0"))


def encode_field_batch(model: NbmModel, f: str, coord_term, values, pool_weights, ops=ad.recorded):
    """Pooled field latent, (B, 1, d_field).

    ``values`` are normalized samples (B, M, 1); ``pool_weights`` (B, 1, M)
    hold 1/M on real samples and 0 on padding. Pooling happens before the
    output layer, which is affine, so the result equals the mean of the
    per-sample encoder outputs.
    """
    cfg, P = model.config, model.params
    x = ops.tanh(ops.add(coord_term, ops.mul(values, ops.param(P, f"enc.{f}.wu"))))
    x = _hidden_stack(model, f"enc.{f}", x, 1, cfg.enc_layers, ops)
    pooled = ops.matmul(pool_weights, x)
    return ops.affine(pooled, ops.param(P, f"enc.{f}.wout"), ops.param(P, f"enc.{f}.bout"))


def fuse(z_geo, z_field, ops=ad.recorded):
    return ops.concat([z_geo, z_field], axis=-1)


def attention_mask(n_cells: int, n_fields: int = len(FIELDS), thermal: str = "T") -> np.ndarray:
    """Additive score mask over cell-major tokens.

    Every token sees the fields of its own cell; thermal queries also see
    the thermal tokens of every other cell.
    """
    t = FIELDS.index(thermal)
    n = n_cells * n_fields
    cell = np.arange(n) // n_fields
    fld = np.arange(n) % n_fields
    allowed = (cell[:, None] == cell[None, :]) | ((fld[:, None] == t) & (fld[None, :] == t))
    return np.where(allowed, 0.0, -np.inf)


def cross_field_coupling(model: NbmModel, tokens: dict, n_cells: int = 1, ops=ad.recorded):
    """Scaled dot-product attention over field tokens.

    ``tokens[f]`` has shape (B*n_cells, 1, d_tok). Returns per-field coupled
    latents (B*n_cells, 1, d_key) and the attention weights
    (B, 3*n_cells, 3*n_cells).
    """
    cfg, P = model.config, model.params
    nf = len(cfg.fields)
    proj = {}
    for m in ("wq", "wk", "wv"):
        per_field = [ops.matmul(tokens[f], ops.param(P, f"attn.{f}.{m}")) for f in cfg.fields]
        stacked = ops.concat(per_field, axis=1)  # (B*n, 3, dk)
        bn = stacked.shape[0]
        proj[m] = ops.reshape(stacked, (bn // n_cells, n_cells * nf, cfg.d_key))
    scores = ops.scale(ops.matmul(proj["wq"], ops.transpose(proj["wk"])), 1.0 / math.sqrt(cfg.d_key))
    if n_cells > 1:
        scores = ops.add(scores, attention_mask(n_cells))
    weights = ops.softmax(scores, axis=-1)
    mixed = ops.matmul(weights, proj["wv"])  # (B, 3n, dk)
    mixed = ops.reshape(mixed, (mixed.shape[0] * n_cells, nf, cfg.d_key))
    out = {f: ops.take(mixed, slice(i, i + 1), axis=1) for i, f in enumerate(cfg.fields)}
    return out, weights


def decode_field_batch(model: NbmModel, f: str, coord_term, coupled, ops=ad.recorded):
    """Normalized predictions at the query points, (B, Q, 1)."""
    cfg, P = model.config, model.params
    x = ops.tanh(ops.add(coord_term, ops.matmul(coupled, ops.param(P, f"dec.{f}.wc"))))
    x = _hidden_stack(model, f"dec.{f}", x, 1, cfg.dec_layers, ops)
    return ops.affine(x, ops.param(P, f"dec.{f}.wout"), ops.param(P, f"dec.{f}.bout"))


@dataclass
class BatchInputs:
    """Padded, normalized model inputs for a batch of (pack) transitions."""

    cloud: np.ndarray  # (B*n, Ng, 2+labels)
    coords: dict[str, np.ndarray]  # (B*n, M, 2)
    values: dict[str, np.ndarray]  # (B*n, M, 1), normalized
    pool: dict[str, np.ndarray]  # (B*n, 1, M)
    n_cells: int = 1


def forward_batch(model: NbmModel, batch: BatchInputs, ops=ad.recorded):
    """Normalized one-step predictions per field, (B*n, M, 1)."""
    geo = encode_geometry_batch(model, batch.cloud, ops)
    tokens = {}
    for f in model.config.fields:
        term = encoder_coord_term(model, f, batch.coords[f], ops)
        z = encode_field_batch(model, f, term, batch.values[f], batch.pool[f], ops)
        tokens[f] = fuse(geo, z, ops)
    coupled, _ = cross_field_coupling(model, tokens, batch.n_cells, ops)
    return {
        f: decode_field_batch(model, f, decoder_coord_term(model, f, batch.coords[f], ops), coupled[f], ops)
        for f in model.config.fields
    }


# --------------------------------------------------------------------------- single-case API

R = ad.raw


def encode_geometry(model: NbmModel, cloud: PointCloud) -> np.ndarray:
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    return encode_geometry_batch(model, cloud.features()[None], R)[0, 0]


def encode_field(model: NbmModel, f: str, coords: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Field latent from raw (coordinate, value) samples; values are normalized here."""
    coords = np.asarray(coords, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ValueError(f"no samples for field {f}")
    m = len(values)
    term = encoder_coord_term(model, f, coords[None], R)
    u = model.norm.forward(f, values).reshape(1, m, 1)
    pool = np.full((1, 1, m), 1.0 / m)
    return encode_field_batch(model, f, term, u, pool, R)[0, 0]


def decode_field(model: NbmModel, f: str, coupled: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """De-normalized decoder output at arbitrary query coordinates."""
    coords = np.asarray(coords, dtype=np.float64)
    term = decoder_coord_term(model, f, coords[None], R)
    out = decode_field_batch(model, f, term, np.asarray(coupled, dtype=np.float64).reshape(1, 1, -1), R)
    return model.norm.inverse(f, out[0, :, 0])


class _Prepared:
    """Geometry latents and coordinate projections cached for a set of cells.

    Nothing here depends on the field values, so a rollout pays for it once.
    """

    def __init__(self, model: NbmModel, domains: list[DiscreteDomain], clouds: list[PointCloud]):
        if len(domains) != len(clouds):
            raise ValueError("one cloud per domain required")
        self.model = model
        self.domains = domains
        self.n_cells = len(domains)
        cfg = model.config
        self.sizes = {f: [d.field_size(f) for d in domains] for f in cfg.fields}
        self.geo = encode_geometry_batch(model, np.stack([c.features() for c in clouds]), R)
        self.enc_term, self.dec_term, self.pool = {}, {}, {}
        for f in cfg.fields:
            coords = _pad_stack([d.field_coords(f) for d in domains])
            self.enc_term[f] = encoder_coord_term(model, f, coords, R)
            self.dec_term[f] = decoder_coord_term(model, f, coords, R)
            self.pool[f] = _pool_weights(self.sizes[f], coords.shape[1])
        self._stack_fields()

    def _stack_fields(self) -> None:
        # Inference fast path: per-field weights stacked on a leading field
        # axis and node axes padded to one length, so each layer is a single
        # broadcast matmul for all fields. Padded rows carry zero pool weight
        # and are sliced off the decoder output.
        cfg, P = self.model.config, self.model.params
        F = cfg.fields
        m = max(self.enc_term[f].shape[1] for f in F)

        def pad(a):
            out = np.zeros(a.shape[:1] + (m,) + a.shape[2:])
            out[:, : a.shape[1]] = a
            return out

        def stack(name):
            # (F, 1, a, b) for matrices, (F, 1, 1, b) for vectors
            a = np.stack([P[name.format(f=f)].value for f in F])
            return a.reshape((len(F), 1) + (1,) * (3 - a.ndim) + a.shape[1:])

        self.m = m
        self.s_enc_term = np.stack([pad(self.enc_term[f]) for f in F])
        self.s_dec_term = np.stack([pad(self.dec_term[f]) for f in F])
        self.s_pool = np.stack([pad(self.pool[f].transpose(0, 2, 1)).transpose(0, 2, 1) for f in F])
        self.s_enc = {"wu": stack("enc.{f}.wu"), "wout": stack("enc.{f}.wout"), "bout": stack("enc.{f}.bout")}
        self.s_dec = {"wc": stack("dec.{f}.wc"), "wout": stack("dec.{f}.wout"), "bout": stack("dec.{f}.bout")}
        for k in range(1, cfg.enc_layers):
            self.s_enc[f"w{k}"], self.s_enc[f"b{k}"] = stack(f"enc.{{f}}.w{k}"), stack(f"enc.{{f}}.b{k}")
        for k in range(1, cfg.dec_layers):
            self.s_dec[f"w{k}"], self.s_dec[f"b{k}"] = stack(f"dec.{{f}}.w{k}"), stack(f"dec.{{f}}.b{k}")
        self.s_attn = {w: stack("attn.{f}." + w) for w in ("wq", "wk", "wv")}
        self.mask = attention_mask(self.n_cells) if self.n_cells > 1 else None

    def tokens(self, states: list[FiberState]) -> dict[str, np.ndarray]:
        model = self.model
        out = {}
        for f in model.config.fields:
            u = _pad_stack([model.norm.forward(f, s.values[f])[:, None] for s in states])
            z = encode_field_batch(model, f, self.enc_term[f], u, self.pool[f], R)
            out[f] = fuse(self.geo, z, R)
        return out

    def step(self, states: list[FiberState]) -> list[FiberState]:
        """One surrogate step for every cell; same arithmetic as the per-field
        blocks, evaluated with the stacked weights."""
        if len(states) != self.n_cells:
            raise ValueError(f"{len(states)} states for {self.n_cells} cells")
        model, cfg = self.model, self.model.config
        F, n = cfg.fields, self.n_cells
        u = np.zeros((len(F), n, self.m, 1))
        for i, f in enumerate(F):
            for k, s in enumerate(states):
                v = s.values[f]
                u[i, k, : v.size, 0] = model.norm.forward(f, v)
        E, D = self.s_enc, self.s_dec
        x = np.tanh(self.s_enc_term + u * E["wu"])
        for k in range(1, cfg.enc_layers):
            x = np.tanh(x @ E[f"w{k}"] + E[f"b{k}"])
        z = (self.s_pool @ x) @ E["wout"] + E["bout"]  # (F, n, 1, d_field)
        geo = np.broadcast_to(self.geo, (len(F),) + self.geo.shape)
        tok = np.concatenate([geo, z], axis=-1)
        q, kk, v = (tok @ self.s_attn[w] for w in ("wq", "wk", "wv"))
        # field-major (F, n, 1, dk) -> cell-major (1, n*F, dk)
        q, kk, v = (a[:, :, 0].transpose(1, 0, 2).reshape(1, n * len(F), cfg.d_key) for a in (q, kk, v))
        scores = (q @ np.swapaxes(kk, -1, -2)) * float(1.0 / math.sqrt(cfg.d_key))
        if self.mask is not None:
            scores = scores + self.mask
        mixed = R.softmax(scores, axis=-1) @ v
        mixed = mixed.reshape(n, len(F), cfg.d_key).transpose(1, 0, 2)[:, :, None]  # (F, n, 1, dk)
        x = np.tanh(self.s_dec_term + mixed @ D["wc"])
        for k in range(1, cfg.dec_layers):
            x = np.tanh(x @ D[f"w{k}"] + D[f"b{k}"])
        pred = x @ D["wout"] + D["bout"]
        out = [dict() for _ in states]
        for i, f in enumerate(F):
            for k, size in enumerate(self.sizes[f]):
                out[k][f] = model.norm.inverse(f, pred[i, k, :size, 0])
        return [FiberState(o, s.t + 1) for o, s in zip(out, states)]

    def step_reference(self, states: list[FiberState]) -> list[FiberState]:
        """The same step through the per-field blocks (slower; for checking)."""
        model = self.model
        coupled, _ = cross_field_coupling(model, self.tokens(states), self.n_cells, R)
        out = [dict() for _ in states]
        for f in model.config.fields:
            pred = decode_field_batch(model, f, self.dec_term[f], coupled[f], R)
            for k, n in enumerate(self.sizes[f]):
                out[k][f] = model.norm.inverse(f, pred[k, :n, 0])
        return [FiberState(o, s.t + 1) for o, s in zip(out, states)]


def _pad_stack(arrays: list[np.ndarray]) -> np.ndarray:
    if len(arrays) == 1:
        return arrays[0][None]
    m = max(len(a) for a in arrays)
    out = np.zeros((len(arrays), m) + arrays[0].shape[1:])
    for k, a in enumerate(arrays):
        out[k, : len(a)] = a
    return out


def _pool_weights(sizes: list[int], m: int) -> np.ndarray:
    w = np.zeros((len(sizes), 1, m))
    for k, n in enumerate(sizes):
        w[k, 0, :n] = 1.0 / n
    return w


def prepare(model: NbmModel, domain: DiscreteDomain, cloud: PointCloud) -> _Prepared:
    return _Prepared(model, [domain], [cloud])


def step_model(model: NbmModel, domain: DiscreteDomain, cloud: PointCloud, state: FiberState) -> FiberState:
    state.check(domain)
    return prepare(model, domain, cloud).step([state])[0]


def rollout(
    model: NbmModel,
    domain: DiscreteDomain,
    cloud: PointCloud,
    initial: FiberState,
    n_steps: int,
    dt: float | None = None,
) -> Trajectory:
    """Feed the model its own predictions for ``n_steps`` steps.

    Only the initial state and the geometry enter from outside.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    initial.check(domain)
    dt = dt or model.config.dt
    prep = prepare(model, domain, cloud)
    states = [initial]
    state = initial
    for k in range(n_steps):
        state = prep.step([state])[0]
        if not all(np.all(np.isfinite(v)) for v in state.values.values()):
            raise RolloutDivergence(k + 1, _traj(domain, dt, states))
        states.append(state)
    return _traj(domain, dt, states)


def _traj(domain: DiscreteDomain, dt: float, states: list[FiberState]) -> Trajectory:
    base = states[0].t
    renum = [FiberState(s.values, s.t - base) for s in states]
    traj = Trajectory(domain.params, domain.grid, dt, renum)
    traj.__dict__["domain"] = domain
    return traj


def latent_state(model: NbmModel, domain: DiscreteDomain, cloud: PointCloud, state: FiberState) -> dict:
    """All intermediate latents of one step, for inspection."""
    prep = prepare(model, domain, cloud)
    tokens = prep.tokens([state])
    coupled, weights = cross_field_coupling(model, tokens, 1, R)
    d_geo = model.config.d_geo
    return {
        "z_g": prep.geo[0, 0],
        "z_f": {f: t[0, 0, d_geo:] for f, t in tokens.items()},
        "h": {f: t[0, 0] for f, t in tokens.items()},
        "c": {f: c[0, 0] for f, c in coupled.items()},
        "attention": weights[0],
    }


def geometry_latents(model: NbmModel, clouds: list[PointCloud]) -> np.ndarray:
    return encode_geometry_batch(model, np.stack([c.features() for c in clouds]), R)[:, 0, :]
