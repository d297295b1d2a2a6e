"""Joint communication-and-sensing link budget under a candidate assignment.

Boresight conventions (2-D):
  * an SPV points one beam at each target it serves, transmitting its full
    power on every beam;
  * a communication target receives with its boresight on its serving SPV;
  * sensing is monostatic, the SPV receives on the same boresight it
    transmits on.

Two evaluation routes exist. ``evaluate`` walks the links one at a time using
the channel functions and ``lobe_class``; it is the reference and the final
constraint check. ``LinkBudget`` precomputes per-topology tensors and scores
whole batches of assignments for the search code.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import channel as ch
from .scenario import Lobe, SensingParams, Topology, lobe_class


class AssignmentError(ValueError):
    """Assignment violates one of the structural constraints."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class SystemParams:
    channel: ch.ChannelParams = field(default_factory=ch.ChannelParams)
    sensing: SensingParams = field(default_factory=SensingParams)
    # False: the wanted echo carries one absorption factor; True: one per leg.
    roundtrip_absorption: bool = False


@dataclass(frozen=True)
class Assignment:
    alpha: np.ndarray  # |K| x |M|
    beta: np.ndarray   # |K| x |N|

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.int8))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.int8))
        if self.alpha.ndim != 2 or self.beta.ndim != 2 or self.alpha.shape[0] != self.beta.shape[0]:
            raise ValueError(f"bad assignment shapes {self.alpha.shape}, {self.beta.shape}")

    @classmethod
    def from_choice(cls, choice, n_spv: int, n_comm: int, n_sense: int) -> "Assignment":
        """Build from the serving-SPV index of each target (comm targets first)."""
        choice = list(choice)
        if len(choice) != n_comm + n_sense:
            raise ValueError("choice length must equal the number of targets")
        alpha = np.zeros((n_spv, n_comm), dtype=np.int8)
        beta = np.zeros((n_spv, n_sense), dtype=np.int8)
        for j, k in enumerate(choice[:n_comm]):
            alpha[k, j] = 1
        for j, k in enumerate(choice[n_comm:]):
            beta[k, j] = 1
        return cls(alpha, beta)

    def choice(self) -> tuple[int, ...]:
        """Serving-SPV index per target; this tuple is also the tie-break key."""
        cols = np.concatenate([self.alpha, self.beta], axis=1)
        if np.any(cols.sum(axis=0) != 1):
            raise AssignmentError(["some target is not served by exactly one SPV"])
        return tuple(int(np.argmax(cols[:, j])) for j in range(cols.shape[1]))

    def violations(self) -> list[str]:
        out = []
        for name, mat in (("alpha", self.alpha), ("beta", self.beta)):
            if np.any((mat != 0) & (mat != 1)):
                out.append(f"{name} has non-binary entries")
        tag = {"alpha": "comm target", "beta": "sensing target"}
        for name, mat in (("alpha", self.alpha), ("beta", self.beta)):
            for j, s in enumerate(mat.sum(axis=0)):
                if s != 1:
                    out.append(f"{tag[name]} {j} served by {int(s)} SPVs, need exactly 1")
        both = np.flatnonzero((self.alpha.sum(axis=1) > 0) & (self.beta.sum(axis=1) > 0))
        for k in both:
            out.append(f"SPV {int(k)} active in both modes")
        return out

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Assignment":
        return cls(np.array(d["alpha"]).reshape(len(d["alpha"]), -1),
                   np.array(d["beta"]).reshape(len(d["beta"]), -1))


@dataclass(frozen=True)
class LinkReport:
    comm_sinr: np.ndarray   # |K| x |M|, 0 where alpha is 0
    comm_rate: np.ndarray   # bit/s
    sense_sinr: np.ndarray  # |K| x |N|, 0 where beta is 0
    objective: float        # sum rate, bit/s
    sensing_ok: np.ndarray  # per sensing target

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.sensing_ok))

    def to_dict(self) -> dict:
        def db(x):
            with np.errstate(divide="ignore"):
                return [[None if v <= 0 else float(10 * np.log10(v)) for v in row] for row in x]
        return {
            "schema": "thzjcs.link_report/1",
            "objective_bps": self.objective,
            "feasible": self.feasible,
            "comm_sinr": self.comm_sinr.tolist(),
            "comm_sinr_db": db(self.comm_sinr),
            "comm_rate_bps": self.comm_rate.tolist(),
            "sense_sinr": self.sense_sinr.tolist(),
            "sense_sinr_db": db(self.sense_sinr),
            "sensing_ok": [bool(x) for x in self.sensing_ok],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# reference route


def _gain(v, boresight, probe) -> float:
    main = lobe_class(v, boresight, probe) is Lobe.MAIN
    return ch.mainlobe_gain(v.antenna) if main else ch.sidelobe_gain(v.antenna)


def _beams(topology: Topology, a: Assignment):
    """(spv vehicle index, target vehicle index) for every active beam."""
    spvs, targets = topology.spvs, topology.targets
    cols = np.concatenate([a.alpha, a.beta], axis=1)
    return [(spvs[k], targets[t]) for k, t in zip(*np.nonzero(cols))]


def _require(flag, what):
    if flag != 1:
        raise AssignmentError([f"{what} is not active in the assignment"])


def _direct_terms(topology, a, params, server, receiver, rx_boresight):
    """Interference and absorption-noise power arriving over direct paths."""
    vs = topology.vehicles
    rx = vs[receiver]
    interference = 0.0
    p, gt, gr, d = [], [], [], []
    for i, t in _beams(topology, a):
        if i == server:
            continue
        tx = vs[i]
        dist = math.dist(tx.position, rx.position)
        g_t = _gain(tx, vs[t].position, rx.position)
        g_r = _gain(rx, rx_boresight, tx.position)
        interference += ch.received_power(tx.tx_power, g_t, g_r, params.channel, dist)
        p.append(tx.tx_power), gt.append(g_t), gr.append(g_r), d.append(dist)
    noise = ch.molecular_absorption_noise(params.channel, p, gt, gr, d)
    return interference, noise


def comm_interference(topology: Topology, a: Assignment, k: int, m: int,
                      params: SystemParams | None = None) -> float:
    """Interference on comm link SPV row ``k`` -> comm column ``m``."""
    params = params or SystemParams()
    _require(a.alpha[k, m], f"comm link {k}->{m}")
    server, victim = topology.spvs[k], topology.comm[m]
    boresight = topology.vehicles[server].position
    return _direct_terms(topology, a, params, server, victim, boresight)[0]


def comm_sinr(topology: Topology, a: Assignment, k: int, m: int,
              params: SystemParams | None = None) -> float:
    params = params or SystemParams()
    if a.alpha[k, m] == 0:
        return 0.0
    vs = topology.vehicles
    tx, rx = vs[topology.spvs[k]], vs[topology.comm[m]]
    dist = math.dist(tx.position, rx.position)
    signal = ch.received_power(tx.tx_power, ch.mainlobe_gain(tx.antenna),
                               ch.mainlobe_gain(rx.antenna), params.channel, dist)
    interference, noise = _direct_terms(topology, a, params, topology.spvs[k],
                                        topology.comm[m], tx.position)
    return signal / (interference + noise)


def _scatter_gain(params: SystemParams, d_in: float, d_kn: float) -> float:
    """Echo factor sigma c^2 / ((4 pi)^3 f^2 d_in^2 d_kn^2 L_A(d_in) L_A(d_kn))."""
    c, f = params.channel.light_speed, params.channel.carrier_frequency
    la = ch.absorption_loss(params.channel, d_in) * ch.absorption_loss(params.channel, d_kn)
    return params.sensing.rcs * c**2 / ((4 * math.pi) ** 3 * f**2 * d_in**2 * d_kn**2 * la)


def sensing_interference(topology: Topology, a: Assignment, k: int, n: int,
                         params: SystemParams | None = None) -> float:
    """Direct-path interference plus echoes of other sensing beams off target ``n``."""
    params = params or SystemParams()
    _require(a.beta[k, n], f"sensing link {k}->{n}")
    vs = topology.vehicles
    server, target = topology.spvs[k], topology.sense[n]
    me, tgt = vs[server], vs[target]
    direct, _ = _direct_terms(topology, a, params, server, server, tgt.position)
    scatter = 0.0
    d_kn = math.dist(me.position, tgt.position)
    g_rx = ch.mainlobe_gain(me.antenna)
    sense_targets = set(topology.sense)
    for i, t in _beams(topology, a):
        if i == server or t not in sense_targets:
            continue
        tx = vs[i]
        d_in = math.dist(tx.position, tgt.position)
        g_t = _gain(tx, vs[t].position, tgt.position)
        scatter += tx.tx_power * g_t * g_rx * _scatter_gain(params, d_in, d_kn)
    return direct + scatter


def sensing_signal(params: SystemParams, tx, distance: float) -> float:
    """Interference-free monostatic echo power for a main-lobe-aligned SPV."""
    g = ch.mainlobe_gain(tx.antenna)
    legs = 2 if params.roundtrip_absorption else 1
    la = ch.absorption_loss(params.channel, distance) ** legs
    ls = ch.radar_spreading_loss(params.channel, distance, params.sensing.rcs)
    return tx.tx_power * g * g / (ls * la)


def sensing_sinr(topology: Topology, a: Assignment, k: int, n: int,
                 params: SystemParams | None = None) -> float:
    params = params or SystemParams()
    if a.beta[k, n] == 0:
        return 0.0
    vs = topology.vehicles
    me, tgt = vs[topology.spvs[k]], vs[topology.sense[n]]
    signal = sensing_signal(params, me, math.dist(me.position, tgt.position))
    _, noise = _direct_terms(topology, a, params, topology.spvs[k], topology.spvs[k], tgt.position)
    return signal / (sensing_interference(topology, a, k, n, params) + noise)


def evaluate(topology: Topology, a: Assignment, params: SystemParams | None = None) -> LinkReport:
    params = params or SystemParams()
    n_spv, n_comm, n_sense = topology.counts
    if a.alpha.shape != (n_spv, n_comm) or a.beta.shape != (n_spv, n_sense):
        raise AssignmentError([f"shape {a.alpha.shape}/{a.beta.shape} does not match topology"])
    bad = a.violations()
    if bad:
        raise AssignmentError(bad)
    c_sinr = np.zeros((n_spv, n_comm))
    s_sinr = np.zeros((n_spv, n_sense))
    for k, m in zip(*np.nonzero(a.alpha)):
        c_sinr[k, m] = comm_sinr(topology, a, k, m, params)
    for k, n in zip(*np.nonzero(a.beta)):
        s_sinr[k, n] = sensing_sinr(topology, a, k, n, params)
    rate = params.channel.bandwidth * np.log2(1.0 + c_sinr)
    objective = 0.0
    for m in range(n_comm):
        objective += float(rate[:, m].sum())
    ok = s_sinr.sum(axis=0) >= params.sensing.min_sensing_sinr
    return LinkReport(c_sinr, rate, s_sinr, objective, ok)


# ---------------------------------------------------------------------------
# vectorized route


def _angles(pos: np.ndarray) -> np.ndarray:
    """ang[a, b, c]: angle at vehicle a between the rays to b and to c."""
    v = pos[None, :, :] - pos[:, None, :]  # v[a, b] = b - a
    bx, by = v[:, :, None, 0], v[:, :, None, 1]
    cx, cy = v[:, None, :, 0], v[:, None, :, 1]
    return np.abs(np.arctan2(bx * cy - by * cx, bx * cx + by * cy))


class LinkBudget:
    """Per-topology tensors for scoring many assignments at once.

    Candidates are integer arrays ``C`` of shape (batch, L): ``C[:, t]`` is
    the SPV row serving target ``t`` (comm targets first).
    """

    def __init__(self, topology: Topology, params: SystemParams | None = None):
        self.topology = topology
        self.params = params = params or SystemParams()
        cp = params.channel
        vs = topology.vehicles
        spv, comm, sense = topology.spvs, topology.comm, topology.sense
        tgt = comm + sense
        self.n_spv, self.n_comm, self.n_sense = len(spv), len(comm), len(sense)
        K, M, N, L = self.n_spv, self.n_comm, self.n_sense, len(tgt)

        pos = topology.positions
        dist = np.sqrt(((pos[:, None] - pos[None]) ** 2).sum(-1))
        safe = np.where(dist > 0, dist, 1.0)
        ang = _angles(pos)
        half = np.array([v.antenna.horizontal_beamwidth / 2.0 for v in vs])
        gm = np.array([ch.mainlobe_gain(v.antenna) for v in vs])
        gs = np.array([ch.sidelobe_gain(v.antenna) for v in vs])
        # gain[a, b, c]: gain of a toward c with boresight on b
        gain = np.where(ang <= half[:, None, None] + 1e-12, gm[:, None, None], gs[:, None, None])
        power = np.array([v.tx_power for v in vs])
        la = np.exp(cp.absorption_coefficient * dist)
        lf = (4 * np.pi * cp.carrier_frequency * safe / cp.light_speed) ** 2
        pg = 1.0 / (la * lf)
        absorbed = (1.0 - 1.0 / la) / lf

        s, t_ = np.array(spv), np.array(tgt)
        cm, sn = np.array(comm, dtype=int), np.array(sense, dtype=int)
        # comm victims: [i, t, m, k]
        g_tx = gain[s[:, None, None], t_[None, :, None], cm[None, None, :]]  # i,t,m
        g_rx = gain[cm[:, None, None], s[None, :, None], s[None, None, :]]   # m,k,i
        base = power[s][:, None, None, None] * g_tx[:, :, :, None] * g_rx.transpose(2, 0, 1)[:, None, :, :]
        self.comm_int = base * pg[s[:, None], cm[None, :]][:, None, :, None]
        self.comm_noise = base * absorbed[s[:, None], cm[None, :]][:, None, :, None]
        self.comm_signal = power[s][:, None] * gm[s][:, None] * gm[cm][None, :] * pg[s[:, None], cm[None, :]]

        # sensing victims: [i, t, n, k]; receiver is SPV k with boresight on n
        g_tx_k = gain[s[:, None, None], t_[None, :, None], s[None, None, :]]   # i,t,k
        g_rx_k = gain[s[:, None, None], sn[None, :, None], s[None, None, :]]   # k,n,i
        direct = (power[s][:, None, None, None]
                  * g_tx_k[:, :, None, :]
                  * g_rx_k.transpose(2, 1, 0)[:, None, :, :])
        self.sense_int = direct * pg[s[:, None], s[None, :]][:, None, None, :]
        self.sense_noise = direct * absorbed[s[:, None], s[None, :]][:, None, None, :]
        if N:
            rcs, c, f = params.sensing.rcs, cp.light_speed, cp.carrier_frequency
            d_in = safe[s[:, None], sn[None, :]]          # i,n
            d_kn = safe[s[:, None], sn[None, :]].T        # n,k
            echo = rcs * c**2 / ((4 * np.pi) ** 3 * f**2
                                 * d_in[:, None, :, None] ** 2 * d_kn[None, None, :, :] ** 2
                                 * la[s[:, None], sn[None, :]][:, None, :, None]
                                 * la[s[:, None], sn[None, :]].T[None, None, :, :])
            g_scatter = gain[s[:, None, None], t_[None, :, None], sn[None, None, :]]  # i,t,n
            scatter = (power[s][:, None, None, None] * g_scatter[:, :, :, None]
                       * gm[s][None, None, None, :] * echo)
            scatter[:, :M] = 0.0  # only sensing-mode beams scatter
            self.sense_int = self.sense_int + scatter
            legs = 2 if params.roundtrip_absorption else 1
            d = safe[s[:, None], sn[None, :]]
            ls = (4 * np.pi) ** 3 * f**2 * d**4 / (rcs * c**2)
            self.sense_signal = power[s][:, None] * gm[s][:, None] ** 2 / (ls * la[s[:, None], sn[None, :]] ** legs)
        else:
            self.sense_signal = np.zeros((K, 0))
        self.noise_floor = cp.noise_floor
        self.L = L

    def mode_ok(self, C: np.ndarray) -> np.ndarray:
        """Per candidate: no SPV serves both a comm and a sensing target."""
        C = np.asarray(C)
        M = self.n_comm
        ok = np.ones(len(C), dtype=bool)
        if M == 0 or self.n_sense == 0:
            return ok
        for k in range(self.n_spv):
            ok &= ~((C[:, :M] == k).any(axis=1) & (C[:, M:] == k).any(axis=1))
        return ok

    def metrics(self, C: np.ndarray):
        """Sum rate, comm SINRs (batch, M) and sensing SINRs (batch, N) per candidate."""
        C = np.asarray(C, dtype=np.intp)
        M, N, L = self.n_comm, self.n_sense, self.L
        B = len(C)
        comm = np.zeros((B, M))
        for j in range(M):
            k = C[:, j]
            interf = np.zeros(B)
            noise = np.full(B, self.noise_floor)
            for t in range(L):
                if t == j:
                    continue
                i = C[:, t]
                live = i != k
                interf += np.where(live, self.comm_int[i, t, j, k], 0.0)
                noise += np.where(live, self.comm_noise[i, t, j, k], 0.0)
            comm[:, j] = self.comm_signal[k, j] / (interf + noise)
        sense = np.zeros((B, N))
        for jj in range(N):
            j = M + jj
            k = C[:, j]
            interf = np.zeros(B)
            noise = np.full(B, self.noise_floor)
            for t in range(L):
                if t == j:
                    continue
                i = C[:, t]
                live = i != k
                interf += np.where(live, self.sense_int[i, t, jj, k], 0.0)
                noise += np.where(live, self.sense_noise[i, t, jj, k], 0.0)
            sense[:, jj] = self.sense_signal[k, jj] / (interf + noise)
        rate = self.params.channel.bandwidth * np.log2(1.0 + comm)
        objective = np.zeros(B)
        for j in range(M):
            objective = objective + rate[:, j]
        return objective, comm, sense

    def sensing_feasible(self, sense_sinr: np.ndarray) -> np.ndarray:
        return np.all(sense_sinr >= self.params.sensing.min_sensing_sinr, axis=1)
