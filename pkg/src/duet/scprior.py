"""Single-cell composition priors.

Learns per-cell-type signature rates from multi-batch single-cell counts with a
negative binomial regression model, deconvolves spot counts into cell-type
abundances with a mean-field log-normal variational posterior, and turns the
conservative 5% abundance quantiles into the per-spot cellular gating signal.

Parameterization notes
----------------------
All strictly positive parameters (rates mu, cell scales l, dispersions) live
as unconstrained reals mapped through softplus plus a 1e-6 floor. Batch
effects are plain reals with batch 0 pinned to zero for identifiability, and
cell scales are renormalized to mean 1 after every epoch (a pure
reparameterization: the rescale is absorbed into mu so the objective value is
unchanged). The deconvolution posterior over abundances w and detection
efficiency d is log-normal: w = exp(loc + exp(logstd) * eps). Its KL against
the log-normal(0,1) prior is closed-form; the likelihood term uses one
reparameterized Monte-Carlo sample per step with noise drawn from a
counter-based stream keyed by step index, so runs replay exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, expit, gammaln

from .core import Rng, SgdState, as_matrix
from .errors import InputError, NumericError

POSITIVE_FLOOR = 1e-6
BATCH_PENALTY = 1e-3
PRIOR_Z05 = -1.6448536269514722  # standard normal 5% quantile


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise InputError("softplus inverse needs positive values")
    # log(e^y - 1) = y + log(1 - e^-y), stable for large y
    return y + np.log(-np.expm1(-np.minimum(y, 700.0)))


def positive(raw):
    return softplus(raw) + POSITIVE_FLOOR


def positive_inv(value):
    return softplus_inv(np.maximum(np.asarray(value, dtype=np.float64) - POSITIVE_FLOOR, 1e-12))


def positive_grad(raw):
    return expit(raw)


def validate_counts(counts, what: str = "counts") -> np.ndarray:
    arr = np.asarray(counts)
    if arr.ndim != 2:
        raise InputError(f"{what} must be a 2-D matrix")
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(arr)
        if not np.all(np.isfinite(arr)) or np.any(np.abs(arr - rounded) > 0):
            raise InputError(f"{what} must be integers")
        arr = rounded.astype(np.int64)
    if np.any(arr < 0):
        raise InputError(f"{what} must be non-negative")
    return arr.astype(np.int64)


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass
class ScDataset:
    """Multi-batch single-cell counts with per-cell type and batch labels."""

    counts: np.ndarray  # (C, G) non-negative ints
    cell_type: np.ndarray  # (C,) labels in [0, n_types)
    batch: np.ndarray  # (C,) labels in [0, n_batches)
    n_types: int = 0
    n_batches: int = 0

    def __post_init__(self):
        self.counts = validate_counts(self.counts, "single-cell counts")
        self.cell_type = np.asarray(self.cell_type, dtype=np.int64)
        self.batch = np.asarray(self.batch, dtype=np.int64)
        c = self.counts.shape[0]
        if c == 0:
            raise InputError("empty single-cell dataset")
        if self.cell_type.shape != (c,) or self.batch.shape != (c,):
            raise InputError("cell_type and batch must have one label per cell")
        if not self.n_types:
            self.n_types = int(self.cell_type.max()) + 1
        if not self.n_batches:
            self.n_batches = int(self.batch.max()) + 1
        if self.cell_type.min() < 0 or self.cell_type.max() >= self.n_types:
            raise InputError("cell_type labels out of range")
        if self.batch.min() < 0 or self.batch.max() >= self.n_batches:
            raise InputError("batch labels out of range")
        present = np.bincount(self.cell_type, minlength=self.n_types)
        if np.any(present == 0):
            missing = int(np.argmin(present))
            raise InputError(f"cell type {missing} has no cells")

    @property
    def n_cells(self) -> int:
        return self.counts.shape[0]

    @property
    def n_genes(self) -> int:
        return self.counts.shape[1]


@dataclass
class GatingSignal:
    """Per-spot estimated cell counts by type: g_st = n_s * normalized q05 row."""

    g: np.ndarray  # (S, T) non-negative
    cell_count: np.ndarray  # (S,)

    def __post_init__(self):
        self.g = as_matrix(self.g)
        self.cell_count = np.asarray(self.cell_count, dtype=np.float64)
        if self.g.shape[0] != self.cell_count.shape[0]:
            raise InputError("gating rows must match cell_count length")
        if np.any(self.g < 0) or np.any(self.cell_count < 0):
            raise InputError("gating signal must be non-negative")


@dataclass
class NbSignatureModel:
    """Negative binomial signature model; all positives via softplus + floor."""

    raw_mu: np.ndarray  # (T, G)
    batch_effect: np.ndarray  # (B, G), row 0 pinned to zero
    raw_cell_scale: np.ndarray  # (C,)
    raw_dispersion: np.ndarray  # (G,)
    fit_trace: list = field(default_factory=list)

    @property
    def mu(self) -> np.ndarray:
        return positive(self.raw_mu)

    @property
    def cell_scale(self) -> np.ndarray:
        return positive(self.raw_cell_scale)

    @property
    def dispersion(self) -> np.ndarray:
        return positive(self.raw_dispersion)

    def signature(self) -> np.ndarray:
        """Signature matrix M (G x T): column t is cell type t's rate profile."""
        return self.mu.T.copy()

    def param_arrays(self) -> list[np.ndarray]:
        return [self.raw_mu, self.batch_effect, self.raw_cell_scale, self.raw_dispersion]


@dataclass
class DeconvPosterior:
    """Mean-field log-normal posterior over abundances and detection efficiency."""

    w_mean: np.ndarray  # (S, T) posterior means E[w]
    w_logstd: np.ndarray  # (S, T) log of posterior std of log-abundance
    detect_mean: np.ndarray  # (S,) posterior means E[d]
    detect_logstd: np.ndarray  # (S,)
    dispersion: np.ndarray  # (G,) fitted per-gene alpha
    w_q05: np.ndarray  # (S, T) 5% quantiles, strictly positive
    fit_trace: list = field(default_factory=list)

    def proportions(self) -> np.ndarray:
        """Posterior-mean abundances normalized per spot."""
        return self.w_mean / self.w_mean.sum(axis=1, keepdims=True)

    def q05_normalized(self) -> np.ndarray:
        return self.w_q05 / self.w_q05.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Negative binomial log-likelihood
# ---------------------------------------------------------------------------


def nb_loglik(x, mu, disp):
    """Log pmf of NB with mean mu and inverse-dispersion disp, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(disp))):
        raise NumericError("non-finite inputs to nb_loglik")
    if np.any(mu <= 0) or np.any(disp <= 0):
        raise InputError("nb_loglik needs mu > 0 and disp > 0")
    if np.any(x < 0):
        raise InputError("nb_loglik needs non-negative counts")
    total = mu + disp
    out = (
        gammaln(x + disp)
        - gammaln(disp)
        - gammaln(x + 1.0)
        + disp * (np.log(disp) - np.log(total))
        + x * (np.log(mu) - np.log(total))
    )
    if np.isscalar(out) or out.ndim == 0:
        return float(out)
    return out


def _nb_dmu(x, mu, disp):
    return x / mu - (x + disp) / (disp + mu)


def _nb_ddisp(x, mu, disp):
    total = disp + mu
    return digamma(x + disp) - digamma(disp) + np.log(disp / total) + (mu - x) / total


# ---------------------------------------------------------------------------
# Signature learning (MAP)
# ---------------------------------------------------------------------------


def signature_loss(model: NbSignatureModel, data: ScDataset):
    """Penalized negative mean log-likelihood and exact gradients.

    Loss = -(1/CG) sum_cg nb_loglik + (1e-3/CG) * ||batch_effect||^2, which is
    the MAP objective scaled by a constant, so the optimum is unchanged.
    """
    x = data.counts.astype(np.float64)
    c, g = x.shape
    scale = 1.0 / (c * g)

    mu_tg = model.mu
    l_c = model.cell_scale
    theta = model.dispersion
    m_cg = model.batch_effect[data.batch]  # (C, G)
    mu_type = mu_tg[data.cell_type]  # (C, G)
    rate = l_c[:, None] * np.exp(m_cg) * mu_type
    if np.any(rate <= 0) or not np.all(np.isfinite(rate)):
        raise NumericError("signature model produced invalid rates")

    theta_row = np.broadcast_to(theta, (c, g))
    ll = nb_loglik(x, rate, theta_row)
    penalty = BATCH_PENALTY * float(np.sum(model.batch_effect**2))
    loss = -scale * float(np.sum(ll)) + scale * penalty

    s = _nb_dmu(x, rate, theta_row)  # dll/drate
    p = s * rate  # dll w.r.t. log-rate, reused for l, m, mu chains

    grad_mu = np.zeros_like(model.raw_mu)
    for t in range(data.n_types):
        mask = data.cell_type == t
        if mask.any():
            grad_mu[t] = p[mask].sum(axis=0) / mu_tg[t]
    grad_raw_mu = -scale * grad_mu * positive_grad(model.raw_mu)

    grad_m = np.zeros_like(model.batch_effect)
    for b in range(data.n_batches):
        mask = data.batch == b
        if mask.any():
            grad_m[b] = p[mask].sum(axis=0)
    grad_m = -scale * grad_m + scale * 2.0 * BATCH_PENALTY * model.batch_effect
    grad_m[0] = 0.0  # reference batch stays pinned

    grad_l = p.sum(axis=1) / l_c
    grad_raw_l = -scale * grad_l * positive_grad(model.raw_cell_scale)

    grad_theta = _nb_ddisp(x, rate, theta_row).sum(axis=0)
    grad_raw_theta = -scale * grad_theta * positive_grad(model.raw_dispersion)

    return loss, [grad_raw_mu, grad_m, grad_raw_l, grad_raw_theta]


def _init_signature_model(data: ScDataset) -> NbSignatureModel:
    # start mu at per-type mean counts: close to the optimum for l=1, m=0
    mu0 = np.zeros((data.n_types, data.n_genes))
    for t in range(data.n_types):
        mu0[t] = data.counts[data.cell_type == t].mean(axis=0)
    mu0 = np.maximum(mu0, 0.05)
    return NbSignatureModel(
        raw_mu=positive_inv(mu0),
        batch_effect=np.zeros((data.n_batches, data.n_genes)),
        raw_cell_scale=np.full(data.n_cells, float(positive_inv(1.0))),
        raw_dispersion=np.full(data.n_genes, float(positive_inv(1.0))),
    )


def _repin_cell_scales(model: NbSignatureModel):
    # divide l by its mean and absorb the factor into mu; loss is unchanged
    l = model.cell_scale
    s = float(l.mean())
    model.raw_cell_scale[...] = positive_inv(np.maximum(l / s, 2 * POSITIVE_FLOOR))
    model.raw_mu[...] = positive_inv(np.maximum(model.mu * s, 2 * POSITIVE_FLOOR))


def fit_signatures(data: ScDataset, epochs: int, rng: Rng, lr: float = 0.2) -> NbSignatureModel:
    """Fit the signature model by full-batch MAP gradient descent."""
    if epochs < 1:
        raise InputError("fit_signatures needs epochs >= 1")
    model = _init_signature_model(data)
    opt = SgdState(lr=lr, momentum=0.9, weight_decay=0.0)
    params = model.param_arrays()
    for epoch in range(epochs):
        # anneal the step size so late epochs settle monotonically
        opt.lr = lr * (1.0 - 0.9 * epoch / max(1, epochs - 1))
        loss, grads = signature_loss(model, data)
        if not np.isfinite(loss):
            raise NumericError(f"signature fit diverged at epoch {epoch}")
        model.fit_trace.append(loss)
        opt.step(params, grads)
        _repin_cell_scales(model)
    return model


# ---------------------------------------------------------------------------
# Deconvolution (mean-field log-normal VI)
# ---------------------------------------------------------------------------


def _kl_std_normal(loc, logstd):
    # KL(N(loc, e^{2 logstd}) || N(0,1)), also the log-normal KL via exp bijection
    var = np.exp(2.0 * logstd)
    return -logstd + 0.5 * (var + loc**2) - 0.5


def deconv_loss(params: dict, y: np.ndarray, m_panel: np.ndarray,
                eps_w: np.ndarray, eps_d: np.ndarray):
    """One-sample reparameterized negative ELBO and exact gradients.

    params: w_loc (S,T), w_logstd (S,T), d_loc (S,), d_logstd (S,), raw_alpha (G,).
    """
    s_n, g_n = y.shape
    scale = 1.0 / (s_n * g_n)

    sd_w = np.exp(params["w_logstd"])
    sd_d = np.exp(params["d_logstd"])
    z_w = params["w_loc"] + sd_w * eps_w
    z_d = params["d_loc"] + sd_d * eps_d
    w = np.exp(z_w)  # (S, T)
    d = np.exp(z_d)  # (S,)
    alpha = positive(params["raw_alpha"])  # (G,)

    base = w @ m_panel.T  # (S, G)
    rate = d[:, None] * base
    if np.any(rate <= 0) or not np.all(np.isfinite(rate)):
        raise NumericError("deconvolution produced invalid rates")
    alpha_row = np.broadcast_to(alpha, (s_n, g_n))
    ll = float(np.sum(nb_loglik(y, rate, alpha_row)))
    kl = float(np.sum(_kl_std_normal(params["w_loc"], params["w_logstd"])))
    kl += float(np.sum(_kl_std_normal(params["d_loc"], params["d_logstd"])))
    loss = -scale * (ll - kl)

    s_mat = _nb_dmu(y, rate, alpha_row)  # (S, G)
    d_ll_d_w = (s_mat * d[:, None]) @ m_panel  # (S, T)
    d_ll_d_d = np.sum(s_mat * base, axis=1)  # (S,)

    grads = {
        "w_loc": -scale * (d_ll_d_w * w - params["w_loc"]),
        "w_logstd": -scale * (d_ll_d_w * w * eps_w * sd_w - (sd_w**2 - 1.0)),
        "d_loc": -scale * (d_ll_d_d * d - params["d_loc"]),
        "d_logstd": -scale * (d_ll_d_d * d * eps_d * sd_d - (sd_d**2 - 1.0)),
        "raw_alpha": -scale * _nb_ddisp(y, rate, alpha_row).sum(axis=0)
        * positive_grad(params["raw_alpha"]),
    }
    return loss, grads


def deconvolve(st_counts, m_panel: np.ndarray, epochs: int, rng: Rng,
               lr: float = 0.1) -> DeconvPosterior:
    """Fit per-spot abundance posteriors against a fixed signature panel."""
    y = validate_counts(st_counts, "spot counts").astype(np.float64)
    m_panel = as_matrix(m_panel)
    if y.shape[1] != m_panel.shape[0]:
        raise InputError(
            f"panel mismatch: counts have {y.shape[1]} genes, signatures {m_panel.shape[0]}"
        )
    if np.any(m_panel <= 0):
        raise InputError("signature panel must be strictly positive")
    if epochs < 1:
        raise InputError("deconvolve needs epochs >= 1")
    s_n, g_n = y.shape
    t_n = m_panel.shape[1]

    totals = np.maximum(y.sum(axis=1), 1.0)
    d0 = totals / float(m_panel.sum())
    params = {
        "w_loc": np.zeros((s_n, t_n)),
        "w_logstd": np.full((s_n, t_n), -2.0),
        "d_loc": np.log(d0),
        "d_logstd": np.full(s_n, -2.0),
        "raw_alpha": np.full(g_n, float(positive_inv(1.0))),
    }
    names = list(params)
    opt = SgdState(lr=lr, momentum=0.9, weight_decay=0.0)
    noise = rng.child("deconv-noise")
    trace = []
    for step in range(epochs):
        opt.lr = lr * (1.0 - 0.9 * step / max(1, epochs - 1))
        eps_w = noise.child("w", step).standard_normal((s_n, t_n))
        eps_d = noise.child("d", step).standard_normal(s_n)
        loss, grads = deconv_loss(params, y, m_panel, eps_w, eps_d)
        if not np.isfinite(loss):
            raise NumericError(f"deconvolution diverged at step {step}")
        trace.append(loss)
        opt.step([params[k] for k in names], [grads[k] for k in names])

    sd_w = np.exp(params["w_logstd"])
    sd_d = np.exp(params["d_logstd"])
    post = DeconvPosterior(
        w_mean=np.exp(params["w_loc"] + 0.5 * sd_w**2),
        w_logstd=params["w_logstd"].copy(),
        detect_mean=np.exp(params["d_loc"] + 0.5 * sd_d**2),
        detect_logstd=params["d_logstd"].copy(),
        dispersion=positive(params["raw_alpha"]),
        w_q05=np.exp(params["w_loc"] + sd_w * PRIOR_Z05),
        fit_trace=trace,
    )
    return post


# ---------------------------------------------------------------------------
# Panel selection and gating
# ---------------------------------------------------------------------------


def select_panel(all_genes: list[str], target_genes: list[str], k: int = 100,
                 rng: Rng | None = None) -> list[str]:
    """Sample k non-target genes for deconvolution, deterministic per seed."""
    if k < 0:
        raise InputError("panel size must be non-negative")
    targets = set(target_genes)
    candidates = sorted(g for g in all_genes if g not in targets)
    if len(candidates) < k:
        raise InputError(
            f"need {k} non-target genes, only {len(candidates)} available"
        )
    if k == 0:
        return []
    rng = rng or Rng(0)
    order = rng.child("panel").permutation(len(candidates))
    chosen = [candidates[i] for i in order[:k]]
    return sorted(chosen)


def build_gating(post: DeconvPosterior, cell_counts) -> GatingSignal:
    """g_st = n_s * normalized 5% quantile row; rows sum to n_s."""
    n = np.asarray(cell_counts, dtype=np.float64)
    if n.ndim != 1 or n.shape[0] != post.w_q05.shape[0]:
        raise InputError("cell_counts must have one entry per spot")
    if np.any(n < 0):
        raise InputError("cell counts must be non-negative")
    if np.any(~np.isfinite(n)):
        raise NumericError("cell counts must be finite")
    g = n[:, None] * post.q05_normalized()
    return GatingSignal(g=g, cell_count=n)


def gating_from_rows(rows: np.ndarray) -> GatingSignal:
    """Wrap precomputed non-negative gating rows (e.g. generator ground truth)."""
    rows = as_matrix(rows)
    return GatingSignal(g=rows, cell_count=rows.sum(axis=1))
