"""Monte Carlo time-tag oracle.

Pairs are emitted as a homogeneous Poisson process. Each photon is routed to
a measurement basis and outcome, then survives with its detector's
efficiency, is smeared by that detector's Gaussian jitter and stamped in
integer picoseconds. Dark counts are independent Poisson processes per
detector. Coincidences are found by a two-pointer sweep with exclusive
first-match pairing.

Randomness is split by chunk and by physical process: chunk ``c`` uses
``SeedSequence(seed, spawn_key=(c, k))`` for process ``k``, so streams are
bit-identical no matter how many workers generate the chunks.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .corrections import DetectorBank
from .errors import EventGuardError
from .model import FWHM_PER_SIGMA, LinkParameters, OperatingPoint, split_polarization_error
from .tagstream import PS, TagStream, default_channel_map

PROCESSES = ("emission", "loss_a", "loss_b", "basis", "polarization",
             "jitter_a", "jitter_b", "dark_a", "dark_b")
DARK = -1


@dataclass(frozen=True)
class SimulationConfig:
    """Everything needed to generate one pair of tag streams.

    ``link`` is a :class:`LinkParameters` (identical detectors) or a
    :class:`DetectorBank`; a bank needs ``e_pol`` (and ``deadtime_s`` when
    ``deadtime`` is on) because it stores no scalar polarization error.
    """

    link: LinkParameters | DetectorBank
    op: OperatingPoint
    duration: float
    seed: int = 0
    deadtime: bool = False
    e_pol: float | None = None
    deadtime_s: float | None = None
    chunk_duration: float | None = None
    max_events: float = 1e9
    workers: int = 1

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.op.brightness * self.duration > self.max_events:
            raise EventGuardError(
                f"B*duration = {self.op.brightness * self.duration:.3g} exceeds the "
                f"event guard {self.max_events:.3g}")


@dataclass
class _Party:
    eta: np.ndarray
    dc: np.ndarray
    sigma: np.ndarray
    e_arm: float

    @property
    def n(self):
        return self.eta.size

    @property
    def n_bases(self):
        return self.n // 2

    @property
    def p_max(self):
        return float(self.n * self.eta.max())


def _parties(cfg):
    link = cfg.link
    if isinstance(link, LinkParameters):
        d = link.detectors_per_party
        fwhm = float(link.t_delta(cfg.op.brightness)) / math.sqrt(2.0)
        e = split_polarization_error(link.e_pol if cfg.e_pol is None else cfg.e_pol)
        mk = lambda eta, dc: _Party(np.full(d, eta / d), np.full(d, dc / d),  # noqa: E731
                                    np.full(d, fwhm / FWHM_PER_SIGMA), e)
        pa, pb = mk(link.eta_a, link.dc_a), mk(link.eta_b, link.dc_b)
        correlated, deadtime = True, link.deadtime
    else:
        if cfg.e_pol is None:
            raise ValueError("simulating a DetectorBank requires SimulationConfig.e_pol")
        e = split_polarization_error(cfg.e_pol)

        def mk(dets):
            return _Party(np.array([x.eta for x in dets]), np.array([x.dc for x in dets]),
                          np.array([x.jitter_fwhm for x in dets]) / FWHM_PER_SIGMA, e)

        pa, pb = mk(link.alice), mk(link.bob)
        if link.dispersion_fwhm > 0:
            # split quadrature dispersion evenly over both arms
            extra = (link.dispersion_fwhm / FWHM_PER_SIGMA) ** 2 / 2.0
            pa.sigma = np.sqrt(pa.sigma**2 + extra)
            pb.sigma = np.sqrt(pb.sigma**2 + extra)
        correlated, deadtime = link.bell_correlated, cfg.deadtime_s or 0.0
    for name, p in (("alice", pa), ("bob", pb)):
        if p.n % 2:
            raise ValueError(f"{name} needs an even number of detectors (two per basis)")
        if p.p_max > 1.0 + 1e-12:
            raise ValueError(f"{name}: n * max(eta_j) must not exceed 1")
    if pa.n_bases != pb.n_bases:
        raise ValueError("both parties must measure the same number of bases")
    return pa, pb, correlated, deadtime


def _rngs(seed, chunk):
    return {name: np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(seed, spawn_key=(chunk, k)))) for k, name in enumerate(PROCESSES)}


def _chunk_duration(cfg, pa, pb):
    if cfg.chunk_duration is not None:
        return float(cfg.chunk_duration)
    busy = cfg.op.brightness * (pa.p_max + pb.p_max) + pa.dc.sum() + pb.dc.sum()
    return float(min(cfg.duration, max(1e-4, 2e6 / max(busy, 1.0))))


def _simulate_chunk(cfg, pa, pb, correlated, chunk, t0, t1):
    g = _rngs(cfg.seed, chunk)
    tc = t1 - t0
    b = float(cfg.op.brightness)
    p_a, p_b = pa.p_max, pb.p_max
    p_any = 1.0 - (1.0 - p_a) * (1.0 - p_b)

    # only pairs with at least one photon that could be detected are drawn;
    # this is an exact thinning of the full emission process
    n = int(g["emission"].poisson(b * tc * p_any)) if p_any > 0 else 0
    t_emit = t0 + g["emission"].uniform(0.0, tc, n)
    cand_a = g["loss_a"].random(n) < p_a / p_any if n else np.zeros(0, bool)
    cand_b = np.where(cand_a, g["loss_b"].random(n) < p_b, True)

    basis_a = g["basis"].integers(0, pa.n_bases, n)
    basis_b = g["basis"].integers(0, pb.n_bases, n)
    ideal = g["polarization"].integers(0, 2, n)
    flip_a = g["polarization"].random(n) < pa.e_arm
    flip_b = g["polarization"].random(n) < pb.e_arm
    random_b = g["polarization"].integers(0, 2, n)
    bit_a = ideal ^ flip_a
    same = basis_a == basis_b
    bit_b = np.where(same, ideal ^ flip_b ^ (not correlated), random_b)
    det_a = 2 * basis_a + bit_a
    det_b = 2 * basis_b + bit_b

    keep_a = cand_a & (g["loss_a"].random(n) * p_a < pa.n * pa.eta[det_a])
    keep_b = cand_b & (g["loss_b"].random(n) * p_b < pb.n * pb.eta[det_b])
    pair_id = (np.int64(chunk) << 32) + np.arange(n, dtype=np.int64)

    # each term is quantized on its own so that a fixed delay stays exact in ps
    emit_ps = np.rint(t_emit / PS).astype(np.int64)
    ta = emit_ps[keep_a] + np.rint(
        g["jitter_a"].normal(0.0, 1.0, int(keep_a.sum())) * pa.sigma[det_a[keep_a]] / PS
    ).astype(np.int64)
    tb = emit_ps[keep_b] + int(round(cfg.op.t_d / PS)) + np.rint(
        g["jitter_b"].normal(0.0, 1.0, int(keep_b.sum())) * pb.sigma[det_b[keep_b]] / PS
    ).astype(np.int64)

    out = []
    for party, t, det, ids, rng in (
        (pa, ta, det_a[keep_a], pair_id[keep_a], g["dark_a"]),
        (pb, tb, det_b[keep_b], pair_id[keep_b], g["dark_b"]),
    ):
        counts = rng.poisson(party.dc * tc)
        dark_t = np.rint((t0 + rng.uniform(0.0, tc, counts.sum())) / PS).astype(np.int64)
        dark_ch = np.repeat(np.arange(party.n), counts)
        out.append((
            np.concatenate([t, dark_t]),
            np.concatenate([det, dark_ch]).astype(np.uint8),
            np.concatenate([ids, np.full(dark_t.size, DARK, dtype=np.int64)]),
        ))
    return out


def nonparalyzable_keep(ts, channel, deadtime_ps):
    """Mask of tags surviving a non-paralyzable deadtime on each channel.

    A tag arriving within ``deadtime_ps`` of the last *registered* tag on the
    same channel is dropped and does not extend the dead interval.
    """
    keep = np.ones(ts.size, dtype=bool)
    if deadtime_ps <= 0 or ts.size == 0:
        return keep
    for ch in np.unique(channel):
        idx = np.nonzero(channel == ch)[0]
        t = ts[idx]
        close = (np.nonzero(np.diff(t) < deadtime_ps)[0] + 1).tolist()
        if not close:
            continue
        tl = t.tolist()
        k = keep[idx]
        prev, last = -2, 0
        for i in close:
            if i - 1 != prev:
                last = tl[i - 1]
            if tl[i] - last < deadtime_ps:
                k[i] = False
            else:
                last = tl[i]
            prev = i
        keep[idx] = k
    return keep


@dataclass
class GroundTruth:
    """Pair id of every tag (``-1`` for dark counts), aligned with the streams."""

    alice_pair: np.ndarray
    bob_pair: np.ndarray


def generate_tag_streams(cfg):
    """Simulate both parties; returns ``(alice, bob, truth)``."""
    pa, pb, correlated, deadtime = _parties(cfg)
    tc = _chunk_duration(cfg, pa, pb)
    n_chunks = max(1, math.ceil(cfg.duration / tc - 1e-9))
    edges = [(c, c * tc, min((c + 1) * tc, cfg.duration)) for c in range(n_chunks)]

    def work(e):
        return _simulate_chunk(cfg, pa, pb, correlated, *e)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            chunks = list(ex.map(work, edges))
    else:
        chunks = [work(e) for e in edges]

    end_ps = int(round(cfg.duration / PS))
    streams, truths = [], []
    for side, party, name in ((0, pa, "alice"), (1, pb, "bob")):
        ts = np.concatenate([c[side][0] for c in chunks])
        ch = np.concatenate([c[side][1] for c in chunks])
        ids = np.concatenate([c[side][2] for c in chunks])
        inside = (ts >= 0) & (ts < end_ps)
        ts, ch, ids = ts[inside], ch[inside], ids[inside]
        order = np.argsort(ts, kind="stable")
        ts, ch, ids = ts[order], ch[order], ids[order]
        if cfg.deadtime and deadtime > 0:
            keep = nonparalyzable_keep(ts, ch, int(round(deadtime / PS)))
            ts, ch, ids = ts[keep], ch[keep], ids[keep]
        meta = {"seed": int(cfg.seed), "brightness": float(cfg.op.brightness),
                "t_d": float(cfg.op.t_d), "deadtime_applied": bool(cfg.deadtime and deadtime > 0)}
        streams.append(TagStream(ch, ts, cfg.duration, default_channel_map(party.n), name, meta))
        truths.append(ids)
    return streams[0], streams[1], GroundTruth(truths[0], truths[1])


# ---------------------------------------------------------------------------
# Coincidence counting
# ---------------------------------------------------------------------------

@dataclass
class Coincidences:
    """Result of a coincidence search.

    ``cc_measured`` counts all matched pairs; ``cc_sifted`` those measured in
    the same basis, of which ``cc_err`` disagree with the Bell correlation.
    """

    cc_measured: int
    cc_sifted: int
    cc_err: int
    n_ambiguous: int
    per_combination: np.ndarray
    alice_index: np.ndarray
    bob_index: np.ndarray
    duration: float
    t_cc: float
    t_d: float

    @property
    def qber(self):
        return self.cc_err / self.cc_sifted if self.cc_sifted else float("nan")

    def rates(self):
        d = self.duration
        return {"cc_measured": self.cc_measured / d, "cc_sifted": self.cc_sifted / d,
                "cc_err": self.cc_err / d}

    def true_mask(self, truth):
        """Which matches join the two photons of one pair (needs ground truth)."""
        a = truth.alice_pair[self.alice_index]
        b = truth.bob_pair[self.bob_index]
        return (a == b) & (a >= 0)


def _window(t_cc, t_d):
    half = t_cc / 2.0 / PS
    td = t_d / PS
    # closed interval, inclusive at exactly +-t_cc/2
    return math.ceil(td - half - 1e-9), math.floor(td + half + 1e-9)


def count_coincidences(alice, bob, t_cc, t_d=0.0, seed=0, bell_correlated=True):
    """Pair Alice and Bob tags with ``|t_b - t_a - t_d| <= t_cc/2``.

    Each tag joins at most one coincidence (earliest eligible Bob tag for
    each Alice tag in time order). When another detector of the same party
    also fired inside the window, that party's outcome is drawn at random
    among the fired detectors.
    """
    if not alice.is_sorted or not bob.is_sorted:
        raise ValueError("tag streams must be sorted by timestamp")
    if not t_cc > 0:
        raise ValueError("t_cc must be > 0")
    a, b = alice.timestamp, bob.timestamp
    lo_off, hi_off = _window(t_cc, t_d)
    na_ch = max(alice.channels) + 1 if alice.channels else 1
    nb_ch = max(bob.channels) + 1 if bob.channels else 1
    empty = np.zeros(0, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        return Coincidences(0, 0, 0, 0, np.zeros((na_ch, nb_ch), np.int64), empty, empty,
                            alice.duration, t_cc, t_d)

    lo = a + lo_off
    hi = a + hi_off
    cand = np.searchsorted(b, lo, side="left")
    safe = np.minimum(cand, b.size - 1)
    hits = np.nonzero((cand < b.size) & (b[safe] <= hi))[0]

    ai, bi = [], []
    p = 0
    bl = b.tolist()
    cl = cand[hits].tolist()
    hl = hi[hits].tolist()
    nb = b.size
    for k, c, h in zip(hits.tolist(), cl, hl):
        j = c if c > p else p
        if j < nb and bl[j] <= h:
            ai.append(k)
            bi.append(j)
            p = j + 1
    ai = np.asarray(ai, dtype=np.int64)
    bi = np.asarray(bi, dtype=np.int64)

    ch_a = alice.channel[ai].astype(np.int64)
    ch_b = bob.channel[bi].astype(np.int64)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xC0,)))

    # other tags of the same party inside the window of this coincidence
    b_lo = np.searchsorted(b, lo[ai], side="left")
    b_hi = np.searchsorted(b, hi[ai], side="right")
    a_lo = np.searchsorted(a, b[bi] - hi_off, side="left")
    a_hi = np.searchsorted(a, b[bi] - lo_off, side="right")
    n_amb = 0
    for side, (s_lo, s_hi, arr_ch, chans) in enumerate(
        ((a_lo, a_hi, alice.channel, ch_a), (b_lo, b_hi, bob.channel, ch_b))
    ):
        multi = np.nonzero(s_hi - s_lo > 1)[0]
        for m in multi.tolist():
            fired = np.unique(arr_ch[s_lo[m]:s_hi[m]])
            if fired.size > 1:
                chans[m] = int(fired[rng.integers(fired.size)])
                n_amb += 1

    basis_a, bit_a = alice.basis_bit(ch_a)
    basis_b, bit_b = bob.basis_bit(ch_b)
    sifted = basis_a == basis_b
    wrong = (bit_a != bit_b) if bell_correlated else (bit_a == bit_b)
    per = np.zeros((max(na_ch, int(ch_a.max(initial=0)) + 1),
                    max(nb_ch, int(ch_b.max(initial=0)) + 1)), dtype=np.int64)
    np.add.at(per, (ch_a, ch_b), 1)
    return Coincidences(
        cc_measured=int(ai.size), cc_sifted=int(sifted.sum()),
        cc_err=int((sifted & wrong).sum()), n_ambiguous=n_amb, per_combination=per,
        alice_index=ai, bob_index=bi, duration=alice.duration, t_cc=t_cc, t_d=t_d,
    )


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

@dataclass
class Histogram:
    """Binned delays (seconds). ``len(counts) == len(edges) - 1``."""

    edges: np.ndarray
    counts: np.ndarray
    duration: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.size != self.edges.size - 1:
            raise ValueError("len(counts) must equal len(edges) - 1")
        if np.any(self.counts < 0):
            raise ValueError("counts must be >= 0")

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def bin_width(self):
        return float(self.edges[1] - self.edges[0])

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        if not np.array_equal(self.edges, other.edges):
            raise ValueError("histograms have different binning")
        return Histogram(self.edges, self.counts + other.counts, self.duration, dict(self.meta))


def _bins(bin_width, range_):
    lo, hi = map(float, range_)
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    if not hi > lo:
        raise ValueError("histogram range is degenerate")
    nbins = int(round((hi - lo) / bin_width))
    if nbins < 1:
        raise ValueError("histogram range is narrower than one bin")
    return lo, nbins, lo + bin_width * np.arange(nbins + 1)


def _ps(x):
    # seconds to ps, snapping float noise such as 1e-9/1e-12 = 1000.0000000000001
    v = x / PS
    r = round(v)
    return float(r) if abs(v - r) <= 1e-9 * max(1.0, abs(r)) else v


def _delay_counts(a, b, lo_ps, hi_ps, width_ps, nbins, exclude_self=False, block=200_000):
    counts = np.zeros(nbins, dtype=np.int64)
    for s in range(0, a.size, block):
        aa = a[s:s + block]
        j0 = np.searchsorted(b, aa + lo_ps, side="left")
        j1 = np.searchsorted(b, aa + hi_ps, side="left")
        if exclude_self:
            j0 = np.maximum(j0, np.arange(s, s + aa.size) + 1)
        n = np.maximum(j1 - j0, 0)
        tot = int(n.sum())
        if tot == 0:
            continue
        rep = np.repeat(np.arange(aa.size), n)
        offs = np.arange(tot) - np.repeat(np.cumsum(n) - n, n)
        d = b[j0[rep] + offs] - aa[rep]
        k = np.floor((d - lo_ps) / width_ps).astype(np.int64)
        k = k[(k >= 0) & (k < nbins)]
        counts += np.bincount(k, minlength=nbins)
    return counts


def build_histogram(alice, bob, bin_width, range_, per_combination=False, shifts=None):
    """Histogram of pairwise delays ``t_bob - t_alice`` over ``range_`` (s).

    ``per_combination=True`` returns ``{(ch_a, ch_b): Histogram}``; ``shifts``
    maps a combination to a delay subtracted before binning so that peaks
    of all combinations can be aligned and summed.
    """
    lo, nbins, edges = _bins(bin_width, range_)
    duration = min(alice.duration, bob.duration)
    if not per_combination and not shifts:
        c = _delay_counts(alice.timestamp, bob.timestamp, _ps(lo), _ps(lo + nbins * bin_width),
                          _ps(bin_width), nbins)
        return Histogram(edges, c, duration)
    out = {}
    for ca in sorted(alice.channels):
        ta = alice.times(ca)
        for cb in sorted(bob.channels):
            tb = bob.times(cb)
            shift = (shifts or {}).get((ca, cb), 0.0)
            c = _delay_counts(ta, tb, _ps(lo + shift), _ps(lo + shift + nbins * bin_width),
                              _ps(bin_width), nbins)
            out[(ca, cb)] = Histogram(edges, c, duration, {"channels": (ca, cb), "shift": shift})
    if per_combination:
        return out
    total = None
    for h in out.values():
        total = h if total is None else total + h
    return total


def build_autocorrelation(stream, bin_width, max_delay, channel=None):
    """Histogram of positive delays between tags of one channel (or each channel summed)."""
    _, nbins, edges = _bins(bin_width, (0.0, max_delay))
    chans = [channel] if channel is not None else sorted(np.unique(stream.channel).tolist())
    counts = np.zeros(nbins, dtype=np.int64)
    for ch in chans:
        t = stream.times(ch)
        counts += _delay_counts(t, t, 0.0, _ps(nbins * bin_width), _ps(bin_width), nbins,
                                exclude_self=True)
    return Histogram(edges, counts, stream.duration, {"channel": channel})


# ---------------------------------------------------------------------------
# Window-level oracle for the exact per-window probabilities
# ---------------------------------------------------------------------------

def simulate_windows(mu, eta_a, eta_b, p_dc_a=0.0, p_dc_b=0.0, n_windows=1_000_000,
                     seed=0, passive_basis=False):
    """Brute-force the per-window event model; returns ``(n_true, n_accidental)``.

    Each window holds Poisson(mu) ordered pairs and at most one dark click
    per party. A true coincidence is the first pair with any detection,
    detected on both sides, with no later photon or dark click hitting
    another detector of either party. Every other two-party click event
    is accidental.
    """
    c = 0.75 if passive_basis else 0.5
    rng = np.random.default_rng(seed)
    n = rng.poisson(mu, n_windows)
    win = np.repeat(np.arange(n_windows), n)
    pos = np.arange(win.size)
    det_a = rng.random(win.size) < eta_a
    det_b = rng.random(win.size) < eta_b
    any_det = det_a | det_b

    first = np.full(n_windows, np.iinfo(np.int64).max)
    np.minimum.at(first, win[any_det], pos[any_det])
    has = first < np.iinfo(np.int64).max
    fpos = first[has]
    cand = np.zeros(n_windows, dtype=bool)
    cand[has] = det_a[fpos] & det_b[fpos]

    later = pos > first[win]
    spoil = np.zeros(n_windows, dtype=bool)
    sa = later & det_a & (rng.random(win.size) < c)
    sb = later & det_b & (rng.random(win.size) < c)
    spoil[win[sa | sb]] = True
    dark_a = rng.random(n_windows) < p_dc_a
    dark_b = rng.random(n_windows) < p_dc_b
    spoil |= dark_a & (rng.random(n_windows) < c)
    spoil |= dark_b & (rng.random(n_windows) < c)

    click_a = dark_a.copy()
    click_b = dark_b.copy()
    click_a[win[det_a]] = True
    click_b[win[det_b]] = True
    true = cand & ~spoil
    both = click_a & click_b
    return int(true.sum()), int((both & ~true).sum())
