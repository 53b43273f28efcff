"""One-weight likelihood profiles and the ReLU flat-region bound.

For a hidden unit with pre-activation ``a = w_i h_i + rest`` and ReLU
activation, ``a <= 0`` (so the unit and every gradient through it vanish)
whenever ``w_i <= -rest / h_i`` for ``h_i > 0``; when ``h_i = 0`` the weight
never influences ``a``.  Taking the minimum over examples (and, for conv
kernels, over every spatial site the kernel element touches) gives the bound
below which the data log-likelihood is exactly constant in ``w_i``.

All evaluations work on private copies: the network passed in is never
modified.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import BadAddress, InfiniteWStar, NegativeInput, NotEnoughWeights, NotReLU
from .nn import PointNetwork, forward_arrays, leaky_relu, log_softmax, loss_and_grads, maxpool2x2_forward

DEFAULT_FLAT_TOL = 1e-9
DEFAULT_NEAR_FRAC = 0.25
DEFAULT_POINTS = 256
DEFAULT_HALF_WIDTH = 3.0
FD_STEP = 1e-4


@dataclass(frozen=True)
class WeightAddress:
    layer: int
    out: int
    in_: int  # dense: input unit; conv: flat index into (in_channel, kh, kw)


@dataclass(frozen=True)
class ProfileScan:
    addr: WeightAddress
    grid: np.ndarray
    loglik: np.ndarray

    @property
    def mode_value(self) -> float:
        # last maximum: a flat top containing the mode reports its right edge
        k = len(self.loglik) - 1 - int(np.argmax(self.loglik[::-1]))
        return float(self.grid[k])

    def normalized_likelihood(self) -> np.ndarray:
        return np.exp(self.loglik - self.loglik.max())


@dataclass(frozen=True)
class PlateauReport:
    has_left_plateau: bool
    plateau_boundary_est: float  # nan without a plateau
    theoretical_w_star: float  # nan when not computable, inf when the input is always 0
    near_mode: bool


def _xy(data):
    x, y = data
    x = getattr(x, "pixels", x)
    y = getattr(y, "labels", y)
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def _index(net: PointNetwork, addr: WeightAddress):
    if not 0 <= addr.layer < len(net.arch.layers):
        raise BadAddress(f"layer {addr.layer} out of range")
    W = net.weight(addr.layer)
    n_in = int(np.prod(W.shape[1:]))
    if not (0 <= addr.out < W.shape[0] and 0 <= addr.in_ < n_in):
        raise BadAddress(f"{addr} outside weight shape {W.shape}")
    return (addr.out,) + tuple(int(i) for i in np.unravel_index(addr.in_, W.shape[1:]))


def address_from_flat(net: PointNetwork, layer: int, flat: int) -> WeightAddress:
    W = net.weight(layer)
    n_in = int(np.prod(W.shape[1:]))
    return WeightAddress(layer, int(flat // n_in), int(flat % n_in))


class _Profile:
    """Caches the probed layer's input and pre-activation; re-runs only the layers downstream."""

    def __init__(self, net: PointNetwork, addr: WeightAddress, data):
        self.idx = _index(net, addr)
        self.net, self.addr = net, addr
        self.x, self.y = _xy(data)
        _, caches = forward_arrays(net.arch, net.params, net.alpha, self.x)
        c = caches[addr.layer]
        self.w0 = float(net.weight(addr.layer)[self.idx])
        self.a = c.a
        if net.arch.layers[addr.layer].kind == "dense":
            self.h = c.h[:, addr.in_]
        else:
            _, ch, p, q = self.idx
            Ho, Wo = c.a.shape[2:]
            self.h = c.h[:, ch, p:p + Ho, q:q + Wo]

    def _a(self, w: float):
        a = self.a.copy()
        a[:, self.addr.out] += (w - self.w0) * self.h
        return a

    def logits(self, w: float):
        arch, l = self.net.arch, self.addr.layer
        a = self._a(w)
        if not arch.is_hidden(l):
            return a
        z = leaky_relu(a, self.net.alpha)
        if arch.layers[l].kind == "conv":
            z, _ = maxpool2x2_forward(z)
        logits, _ = forward_arrays(arch, self.net.params, self.net.alpha, z, start=l + 1)
        return logits

    def loglik(self, w: float) -> float:
        logp = log_softmax(self.logits(w))
        return float(logp[np.arange(len(self.y)), self.y].sum())

    def site_w_star(self) -> np.ndarray:
        """Per-site bound, shape (n_examples, n_sites); +inf where the input is 0."""
        n = len(self.h)
        h = self.h.reshape(n, -1)
        rest = self.a[:, self.addr.out].reshape(n, -1) - self.w0 * h
        out = np.full(h.shape, np.inf)
        pos = h > 0
        out[pos] = -rest[pos] / h[pos]
        return out


def conditional_loglik(net: PointNetwork, addr: WeightAddress, w_value: float, data) -> float:
    """Sum over examples of ln p(y | x) with the addressed weight set to ``w_value``."""
    return _Profile(net, addr, data).loglik(float(w_value))


def _premise(net: PointNetwork, prof: _Profile, check_slope: bool):
    if check_slope and net.alpha != 0.0:
        raise NotReLU(f"activation slope is {net.alpha}, the bound needs ReLU (0)")
    if not net.arch.is_hidden(prof.addr.layer):
        raise BadAddress(f"layer {prof.addr.layer} is the linear output layer")
    if np.any(prof.h < 0):
        raise NegativeInput(f"{prof.addr}: min input {prof.h.min():.3g} < 0")


def site_w_star(net: PointNetwork, addr: WeightAddress, data, check_slope: bool = True) -> np.ndarray:
    prof = _Profile(net, addr, data)
    _premise(net, prof, check_slope)
    return prof.site_w_star()


def theoretical_w_star(net: PointNetwork, addr: WeightAddress, data, check_slope: bool = True) -> float:
    """Dataset-level bound ``min_n -(rest_n) / h_n``, or +inf if the input is always zero.

    ``check_slope=False`` evaluates the same formula on non-ReLU nets, where it
    no longer bounds anything but still names a reference point.
    """
    ws = site_w_star(net, addr, data, check_slope)
    return float(ws.min()) if ws.size else float("inf")


def default_window(w: float, half_width: float = DEFAULT_HALF_WIDTH) -> tuple[float, float]:
    s = max(1.0, abs(w))
    return w - half_width * s, w + half_width * s


def _scan(prof: _Profile, lo: float, hi: float, n_points: int) -> ProfileScan:
    if not lo < hi:
        raise ValueError(f"empty scan window [{lo}, {hi}]")
    if n_points < 16:
        raise ValueError("a scan needs at least 16 points")
    grid = np.linspace(lo, hi, n_points)
    ll = np.array([prof.loglik(float(w)) for w in grid])
    return ProfileScan(prof.addr, grid, ll)


def scan_profile(net: PointNetwork, addr: WeightAddress, lo: float, hi: float, n_points: int, data) -> ProfileScan:
    return _scan(_Profile(net, addr, data), lo, hi, n_points)


def detect_plateau(scan: ProfileScan, flat_tol: float = DEFAULT_FLAT_TOL, near_frac: float = DEFAULT_NEAR_FRAC,
                   w_star: float | None = None) -> PlateauReport:
    """Flag a flat left end of the profile.

    The flat prefix is the longest run of grid points whose log-likelihood
    stays within ``flat_tol`` of the first point.  It counts as a plateau when
    it spans at least 3 points and, if a theoretical bound is given, the scan
    starts below it.
    """
    ll = scan.loglik
    flat = np.abs(ll - ll[0]) < flat_tol
    k = len(ll) if flat.all() else int(np.argmin(flat))  # first non-flat index
    has = k >= 3
    ws = float("nan") if w_star is None else float(w_star)
    if w_star is not None and not scan.grid[0] < w_star:
        has = False
    if not has:
        return PlateauReport(False, float("nan"), ws, False)
    boundary = float(scan.grid[k - 1])
    width = float(scan.grid[-1] - scan.grid[0])
    near = (scan.mode_value - boundary) <= near_frac * width
    return PlateauReport(True, boundary, ws, bool(near))


@dataclass
class SurveyResult:
    addresses: list[WeightAddress]
    reports: list[PlateauReport]
    scans: list[ProfileScan] = field(repr=False)
    bound_scans: dict[int, ProfileScan] = field(default_factory=dict, repr=False)

    @property
    def frac_plateau(self) -> float:
        return float(np.mean([r.has_left_plateau for r in self.reports])) if self.reports else 0.0

    @property
    def frac_near_mode(self) -> float:
        return float(np.mean([r.near_mode for r in self.reports])) if self.reports else 0.0


def _bound_or_reference(net, prof) -> tuple[float | None, float | None]:
    """(bound usable by detect_plateau, reference point for a bound-centred scan)."""
    try:
        _premise(net, prof, check_slope=False)
    except (NegativeInput, BadAddress):
        return None, None
    ref = float(prof.site_w_star().min())
    return (ref if net.alpha == 0.0 else None), ref


def survey(net: PointNetwork, data, layer: int, K: int, rng: np.random.Generator,
           n_points: int = DEFAULT_POINTS, half_width: float = DEFAULT_HALF_WIDTH,
           flat_tol: float = DEFAULT_FLAT_TOL, near_frac: float = DEFAULT_NEAR_FRAC,
           probe_bound: bool = True) -> SurveyResult:
    """Scan ``K`` weights of ``layer`` drawn uniformly without replacement.

    Each weight gets a vicinity scan around its current value.  When that scan
    shows no flat left end and the bound formula places the onset further
    left, a second scan of the same width is centred on the formula value
    (``probe_bound``); a flat prefix there also counts as a plateau.  On
    non-ReLU nets the formula is only a reference point and flatness alone
    decides.  ``near_mode`` is always judged against the vicinity scan.
    """
    if not 0 <= layer < len(net.arch.layers):
        raise BadAddress(f"layer {layer} out of range")
    n_w = net.weight(layer).size
    if K > n_w:
        raise NotEnoughWeights(f"layer {layer} has {n_w} weights, asked for {K}")
    flat = rng.choice(n_w, size=K, replace=False)
    result = SurveyResult([], [], [])
    for f in flat:
        addr = address_from_flat(net, layer, int(f))
        prof = _Profile(net, addr, data)
        lo, hi = default_window(prof.w0, half_width)
        scan = _scan(prof, lo, hi, n_points)
        w_star, ref = _bound_or_reference(net, prof)
        rep = detect_plateau(scan, flat_tol, near_frac, w_star)
        if probe_bound and not rep.has_left_plateau and ref is not None and np.isfinite(ref) and ref < lo:
            s = max(1.0, abs(prof.w0))
            tail = _scan(prof, ref - half_width * s, ref + half_width * s, n_points)
            result.bound_scans[len(result.scans)] = tail
            trep = detect_plateau(tail, flat_tol, near_frac, w_star)
            if trep.has_left_plateau:
                near = (scan.mode_value - trep.plateau_boundary_est) <= near_frac * (hi - lo)
                rep = PlateauReport(True, trep.plateau_boundary_est, rep.theoretical_w_star, bool(near))
        result.addresses.append(addr)
        result.reports.append(rep)
        result.scans.append(scan)
    return result


@dataclass
class DeltaCheck:
    delta: float
    w: float
    grad_backprop: float
    grad_fd: float
    loglik: float


@dataclass
class Verification:
    addr: WeightAddress
    w_star: float
    checks: list[DeltaCheck]
    passed: bool
    grad_ok: bool
    fd_ok: bool
    loglik_ok: bool


def _mean_nll(net, x, y) -> float:
    logits, _ = forward_arrays(net.arch, net.params, net.alpha, x)
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(y)), y].mean())


def verify_proposition(net: PointNetwork, addr: WeightAddress, data, deltas=(0.1, 1.0, 10.0),
                       grad_tol: float = 1e-12, fd_tol: float = 1e-8, ll_tol: float = 1e-9) -> Verification:
    """Check that the likelihood is flat in the weight just below its bound.

    At every ``w* - delta``: the backprop gradient of the mean NLL, a central
    finite difference of it, and the conditional log-likelihood are computed on
    a private copy of the network.
    """
    if net.alpha != 0.0:
        raise NotReLU(f"activation slope is {net.alpha}, the bound needs ReLU (0)")
    if not deltas or any(not d > 0 for d in deltas):
        raise ValueError("deltas must be strictly positive")
    w_star = theoretical_w_star(net, addr, data)
    if not np.isfinite(w_star):
        raise InfiniteWStar(f"{addr}: input is zero on every example, no finite bound")
    x, y = _xy(data)
    idx = _index(net, addr)
    pidx = 2 * addr.layer
    prof = _Profile(net, addr, data)
    work = net.copy()
    checks = []
    for d in deltas:
        w = w_star - d
        work.params[pidx][idx] = w
        _, grads = loss_and_grads(work, x, y)
        g = float(grads[pidx][idx])
        work.params[pidx][idx] = w + FD_STEP
        up = _mean_nll(work, x, y)
        work.params[pidx][idx] = w - FD_STEP
        down = _mean_nll(work, x, y)
        checks.append(DeltaCheck(d, w, g, (up - down) / (2 * FD_STEP), prof.loglik(w)))
    grad_ok = all(abs(c.grad_backprop) < grad_tol for c in checks)
    fd_ok = all(abs(c.grad_fd) < fd_tol for c in checks)
    lls = [c.loglik for c in checks]
    loglik_ok = max(lls) - min(lls) <= ll_tol
    return Verification(addr, w_star, checks, grad_ok and fd_ok and loglik_ok, grad_ok, fd_ok, loglik_ok)


def write_profile_csv(path, scan: ProfileScan) -> None:
    lik = scan.normalized_likelihood()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["w", "loglik", "lik_normalized"])
        for g, ll, p in zip(scan.grid, scan.loglik, lik):
            w.writerow([repr(float(g)), repr(float(ll)), repr(float(p))])


SURVEY_COLUMNS = ["layer", "out_idx", "in_idx", "w_star", "has_plateau", "boundary_est", "near_mode"]


def write_survey_csv(path, result: SurveyResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SURVEY_COLUMNS)
        for a, r in zip(result.addresses, result.reports):
            w.writerow([a.layer, a.out, a.in_, repr(r.theoretical_w_star), int(r.has_left_plateau),
                        repr(r.plateau_boundary_est), int(r.near_mode)])
