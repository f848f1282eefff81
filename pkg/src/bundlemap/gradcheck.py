"""Finite-difference checks of every autodiff primitive and of the full one-step loss."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .geom import DesignParams, GridSpec
from .model import NbmConfig, NbmModel

TOLERANCE = 1e-4


def _weighted(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    # a fixed random projection so that every output entry matters
    return ad.sum_(ad.mul(out, w))


def primitive_cases(seed: int = 0) -> dict[str, tuple]:
    """name -> (loss closure, leaf tensors)."""
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return ad.Tensor(rng.normal(size=shape), requires_grad=True)

    def fixed(*shape):
        return rng.normal(size=shape)

    cases = {}
    a, b = leaf(3, 4), leaf(3, 4)
    wa = fixed(3, 4)
    cases["add"] = (lambda: _weighted(ad.add(a, b), wa), [a, b])
    c, d = leaf(2, 3, 4), leaf(1, 4)
    wc = fixed(2, 3, 4)
    cases["add_broadcast"] = (lambda: _weighted(ad.add(c, d), wc), [c, d])
    e, f = leaf(3, 4), leaf(3, 4)
    cases["sub"] = (lambda: _weighted(ad.sub(e, f), wa), [e, f])
    g, h = leaf(2, 3, 4), leaf(2, 1, 4)
    cases["mul"] = (lambda: _weighted(ad.mul(g, h), wc), [g, h])
    i_ = leaf(3, 4)
    cases["scale"] = (lambda: _weighted(ad.scale(i_, -1.7), wa), [i_])
    m1, m2 = leaf(2, 3, 4), leaf(4, 5)
    wm = fixed(2, 3, 5)
    cases["matmul"] = (lambda: _weighted(ad.matmul(m1, m2), wm), [m1, m2])
    b1, b2 = leaf(2, 3, 4), leaf(2, 4, 5)
    cases["matmul_batched"] = (lambda: _weighted(ad.matmul(b1, b2), wm), [b1, b2])
    x, W, bias = leaf(2, 3, 4), leaf(4, 5), leaf(5)
    cases["affine"] = (lambda: _weighted(ad.affine(x, W, bias), wm), [x, W, bias])
    t = leaf(3, 4)
    cases["tanh"] = (lambda: _weighted(ad.tanh(t), wa), [t])
    s = leaf(2, 3, 4)
    mask = np.where(fixed(3, 4) > 1.2, -np.inf, 0.0)
    mask[:, 0] = 0.0
    cases["softmax"] = (lambda: _weighted(ad.softmax(ad.add(s, mask)), wc), [s])
    mu = leaf(2, 3, 4)
    w_mean = fixed(2, 4)
    cases["mean"] = (lambda: _weighted(ad.mean(mu, axis=1), w_mean), [mu])
    su = leaf(3, 4)
    cases["sum"] = (lambda: ad.sum_(ad.mul(su, su)), [su])
    k1, k2 = leaf(2, 3, 2), leaf(2, 3, 3)
    wk = fixed(2, 3, 5)
    cases["concat"] = (lambda: _weighted(ad.concat([k1, k2], axis=-1), wk), [k1, k2])
    n_ = leaf(2, 3, 4)
    cases["l2_normalize"] = (lambda: _weighted(ad.l2_normalize(n_), wc), [n_])
    tr = leaf(2, 3, 4)
    wt = fixed(2, 4, 3)
    cases["transpose"] = (lambda: _weighted(ad.transpose(tr), wt), [tr])
    rs_ = leaf(2, 3, 4)
    wr = fixed(6, 4)
    cases["reshape"] = (lambda: _weighted(ad.reshape(rs_, (6, 4)), wr), [rs_])
    tk = leaf(5, 3)
    idx = np.array([4, 0, 0, 2])
    wtk = fixed(4, 3)
    cases["take"] = (lambda: _weighted(ad.take(tk, idx, 0), wtk), [tk])
    p_, q_ = leaf(2, 5, 1), fixed(2, 5, 1)
    wmask = (fixed(2, 5, 1) > -0.5).astype(float)
    cases["mse"] = (lambda: ad.mse(p_, q_, wmask), [p_])
    return cases


def model_loss_case(hidden: int = 8, seed: int = 0, n_cells: int = 1, depth: int = 1):
    """Loss closure over a tiny model on real reference transitions."""
    from .pack import PackConfig, simulate_pack, pack_units
    from .refsolver import simulate
    from .train import TransitionSource, Unit, batch_loss, fit_normalization_series
    from .geom import build_domain, sample_geometry_cloud

    grid = GridSpec(6, 6)
    rng = np.random.default_rng(seed)
    units = []
    if n_cells == 1:
        base = DesignParams.midpoint().with_values(tab_width=0.3)
        for k, p in enumerate([base, base.with_values(width=0.8, electrode_frac=0.35)]):
            tr = simulate(p, grid, 2)
            dom = build_domain(p, grid)
            series = {f: tr.field_series(f) for f in ("T", "phi", "c")}
            units.append(Unit([dom], [sample_geometry_cloud(dom, 12, k)], [series], k))
    else:
        from .pack import PackCase

        base = DesignParams.midpoint().with_values(tab_width=0.3)
        cells = tuple(base.with_values(width=w) for w in np.linspace(0.7, 1.3, n_cells))
        cfg = PackConfig(cells, 2.0 * n_cells)
        states = simulate_pack(cfg, grid, 2)
        units = pack_units([PackCase(cfg, list(range(n_cells)), states, "train")], grid, 12)
    cfg = NbmConfig(d_geo=4, d_field=6, d_key=5, geo_hidden=hidden, enc_hidden=hidden, dec_hidden=hidden)
    model = NbmModel.initialize(cfg, seed=seed)
    model.norm = fit_normalization_series(units)
    # move weights off the initialization so no gradient is trivially small
    for name in model.params.names():
        model.params[name].value += 0.1 * rng.normal(size=model.params[name].shape)
    source = TransitionSource(units, model.norm, depth=depth)
    inputs, targets, mask, _ = source.gather(list(range(len(source))))
    return (lambda: batch_loss(model, inputs, targets, mask)), model.params


def run_all(seed: int = 0, sampled_coords: int = 400) -> list[tuple[str, ad.GradCheckReport]]:
    """Every primitive, the one-step loss over all weights, and sampled
    coordinates of the curriculum and pack-mode losses."""
    out = []
    for name, (fn, leaves) in primitive_cases(seed).items():
        out.append((name, ad.grad_check(fn, leaves, tolerance=TOLERANCE)))
    for label, n, depth, coords in (
        ("nbm_loss", 1, 1, None),
        ("nbm_curriculum_loss", 1, 2, sampled_coords),
        ("nbm_pack_loss", 3, 1, sampled_coords),
    ):
        fn, params = model_loss_case(seed=seed, n_cells=n, depth=depth)
        out.append((label, ad.grad_check(fn, params, tolerance=TOLERANCE, max_coords=coords, seed=seed)))
    return out
