"""Quasi-steady thermal-hydraulic network model.

For each period the network state

    x = [q (per edge), p (per node), theta_node (per node),
         theta_edge (per edge), theta_2h, theta_2c, Q_hs (per consumer)]

satisfies the nonlinear residual system c(design, x) = 0 built from:

* pipe momentum: Darcy-Weisbach with the Blasius friction correlation,
      p_i - p_j = f * 8 rho L / (d^5 pi^2) * |q| q,   f = 0.3164 Re^-1/4,
      Re = 4 rho |q| / (pi mu d)
* pipe energy: exponential decay of the ambient-relative temperature,
      theta_out = theta_in * exp(-L / (rho cp |q| R)),
  with R the combined pipe/soil thermal resistance per unit length,
      R = ln(4 h / (r d)) / (2 pi lambda_g) + ln(r) / (2 pi lambda_i)
* junction mass and perfectly-mixed convected energy balances
* consumer substations: control valve q = alpha zeta sqrt(p_i - p_j),
  an effectiveness-NTU heat exchanger, and a radiator power law closing
  the secondary side against the fixed indoor temperature
* producers: imposed volumetric flow and supply temperature, plus one
  reference pressure in a producer return node.

All temperatures are stored relative to the ambient of the period
(theta = T - T_inf); conversions to absolute degC happen only at I/O
boundaries.  Nonsmooth operators are replaced by the smooth surrogates of
:mod:`dhnopt.smoothing`, so the residuals are C1 and the assembled Jacobians
are exact derivatives of the evaluated system.

Periods are independent: `solve_period` is a pure function of
(design, period, initial state) and may run in parallel across periods.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, lsqr

from .smoothing import (FLOW_DELTA, PRESSURE_DELTA, sabs_d, smax_d, smin_d,
                        smin2_d, smax2_d, ssqrt_d, sfloor_d)

# Regularization of the junction energy balance on dead branches, m^3/s.
THETA_REG = 1.0e-9
# Demand floor so zero-demand consumers keep a well-posed substation block, W.
DEMAND_FLOOR = 1.0
# Floors keeping the epsilon-NTU capacity rates positive at vanishing flow.
CMIN_DELTA = 1.0e-9   # smoothing width of the C_min floor, m^3/s
CMIN_EPS = 1.0e-12    # absolute floor, m^3/s
QPOS_EPS = 1.0e-9     # floor of the positive-part flows, m^3/s
# Smooth floor of the radiator LMTD arguments, K.
LMTD_FLOOR = 1.0e-3
LMTD_FLOOR_DELTA = 1.0e-2

DEFAULT_P0 = 101325.0  # reference pressure, Pa


class HydronicsError(ValueError):
    pass


@dataclass(frozen=True)
class FluidProps:
    """Water properties and burial conditions."""
    rho: float = 983.0          # kg/m^3
    mu: float = 4.67e-4         # Pa s
    cp: float = 4185.0          # J/(kg K)
    lambda_i: float = 0.0225    # insulation conductivity, W/(m K)
    lambda_g: float = 1.0       # ground conductivity, W/(m K)
    depth: float = 1.0          # burial depth, m

    def __post_init__(self):
        for name in ("rho", "mu", "cp", "lambda_i", "lambda_g", "depth"):
            if getattr(self, name) <= 0.0:
                raise HydronicsError(f"fluid property {name} must be positive")


@dataclass
class PeriodData:
    """Operating conditions of one representative period."""
    t_ambient: float                 # outdoor temperature, degC
    demand: np.ndarray               # W per consumer, consumer-edge order
    weight: float                    # omega
    peak: bool = False
    availability: Optional[np.ndarray] = None  # bool per producer
    label: str = ""

    def __post_init__(self):
        self.demand = np.asarray(self.demand, dtype=float)
        if self.weight < 0.0:
            raise HydronicsError("period weight must be non-negative")
        if np.any(self.demand < 0.0):
            raise HydronicsError("demands must be non-negative")
        if self.availability is not None:
            self.availability = np.asarray(self.availability, dtype=bool)


@dataclass
class PeriodSet:
    """Representative periods plus the annual active-hours conversion."""
    periods: list
    active_hours: float = 8760.0  # K, h/yr

    def __post_init__(self):
        if not self.periods:
            raise HydronicsError("period set is empty")
        total = sum(p.weight for p in self.periods)
        if abs(total - 1.0) > 1e-9:
            raise HydronicsError(f"period weights sum to {total}, expected 1")

    def __iter__(self):
        return iter(self.periods)

    def __len__(self):
        return len(self.periods)

    @property
    def peak_index(self) -> Optional[int]:
        for i, p in enumerate(self.periods):
            if p.peak:
                return i
        return None


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------

def lmtd(dt_a, dt_b):
    """Log-mean temperature difference with its continuous equal-DT limit."""
    a = np.asarray(dt_a, dtype=float)
    b = np.asarray(dt_b, dtype=float)
    if np.any(a <= 0.0) or np.any(b <= 0.0):
        raise HydronicsError("LMTD requires positive temperature differences")
    out, _, _ = _lmtd_d(a, b)
    if np.isscalar(dt_a) and np.isscalar(dt_b):
        return float(out)
    return out


def _lmtd_d(a, b):
    """LMTD and its partial derivatives; series branch near dt_a == dt_b."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    a, b = np.broadcast_arrays(a, b)
    w = (a - b) / b
    small = np.abs(w) < 1e-5
    ws = np.where(small, w, 0.0)
    # lm/b = w/log1p(w) = 1 + w/2 - w^2/12 + w^3/24 + O(w^4)
    lm_small = b * (1.0 + ws / 2.0 - ws * ws / 12.0 + ws ** 3 / 24.0)
    da_small = 0.5 - ws / 6.0 + ws * ws / 8.0
    # d lm/d b = f(w) - (1+w) f'(w)
    db_small = (1.0 + ws / 2.0 - ws * ws / 12.0) - (1.0 + ws) * da_small
    z = np.log(np.where(small, 2.0, a / b))
    lm_big = np.where(small, 1.0, (a - b) / np.where(z == 0.0, 1.0, z))
    da_big = (1.0 - lm_big / np.where(small, 1.0, a)) / np.where(z == 0.0, 1.0, z)
    db_big = (lm_big / b - 1.0) / np.where(z == 0.0, 1.0, z)
    lm = np.where(small, lm_small, lm_big)
    da = np.where(small, da_small, da_big)
    db = np.where(small, db_small + 0.5 * 0.0, db_big)
    return lm, da, db


def effectiveness(ntu, c_star):
    """Counter-flow heat-exchanger effectiveness; continuous at C* = 1."""
    e, _, _ = _effectiveness_d(ntu, c_star)
    if np.isscalar(ntu) and np.isscalar(c_star):
        return float(e)
    return e


def _effectiveness_d(ntu, c_star):
    """Effectiveness and partials w.r.t. NTU and C*.

    Evaluated through expm1 so the C* -> 1 limit eps = NTU/(1+NTU) is
    reached without cancellation.
    """
    n = np.atleast_1d(np.asarray(ntu, dtype=float))
    cs = np.atleast_1d(np.asarray(c_star, dtype=float))
    n, cs = np.broadcast_arrays(n, cs)
    u = 1.0 - cs
    tiny = np.abs(u) < 1e-12
    us = np.where(tiny, 1.0, u)
    with np.errstate(over="ignore"):
        x = np.exp(-n * us)
    em = -np.expm1(-n * us)          # 1 - x, accurate for small exponents
    den = em + x * us                # = 1 - c* x
    eps = np.where(tiny, n / (1.0 + n), em / den)
    de_dn = np.where(tiny, 1.0 / (1.0 + n) ** 2, us * us * x / (den * den))
    de_dc = np.where(
        tiny,
        -n * n / (2.0 * (1.0 + n) ** 2),
        (-n * x * den + em * (x + cs * n * x)) / (den * den),
    )
    return eps, de_dn, de_dc


def thermal_resistance(d, catalog, fluid: FluidProps):
    """Combined pipe and soil thermal resistance per unit length, m K / W."""
    d = np.asarray(d, dtype=float)
    r = catalog.insulation_ratio
    arg = 4.0 * fluid.depth / (r * d)
    if np.any(arg <= 1.0):
        raise HydronicsError("pipe too large for its burial depth (4h/(r d) <= 1)")
    out = np.log(arg) / (2.0 * np.pi * fluid.lambda_g) + np.log(r) / (2.0 * np.pi * fluid.lambda_i)
    return float(out) if out.ndim == 0 else out


def pipe_pressure_drop(q, d, length, fluid: FluidProps, delta=FLOW_DELTA):
    """Darcy-Weisbach pressure drop with Blasius friction, smoothed at q = 0."""
    q = np.asarray(q, dtype=float)
    s = np.sqrt(q * q + delta * delta)
    beta = 0.3164 * (np.pi * fluid.mu / (4.0 * fluid.rho)) ** 0.25 * 8.0 * fluid.rho / np.pi ** 2
    out = beta * length * d ** -4.75 * s ** 0.75 * q
    return float(out) if out.ndim == 0 else out


def pipe_outlet_temperature(theta_in, q, d, length, catalog, fluid: FluidProps,
                            delta=FLOW_DELTA):
    """Ambient-relative outlet temperature after heat loss along the pipe."""
    q = np.asarray(q, dtype=float)
    s = np.sqrt(q * q + delta * delta)
    res = thermal_resistance(d, catalog, fluid)
    out = theta_in * np.exp(-length / (fluid.rho * fluid.cp * s * res))
    return float(out) if out.ndim == 0 else out


def junction_residuals(q_in, theta_in, q_out, theta_out, theta_node,
                       delta=FLOW_DELTA):
    """Mass and convected-energy residuals of one junction.

    `q_in`/`theta_in` belong to edges pointing into the node, `q_out`/
    `theta_out` to edges pointing out of it; `theta_*` are edge (outlet)
    temperatures.  Smooth max/min upwinding as in the assembled system
    (without the dead-branch regularization term).
    """
    q_in = np.asarray(q_in, dtype=float)
    q_out = np.asarray(q_out, dtype=float)
    theta_in = np.asarray(theta_in, dtype=float)
    theta_out = np.asarray(theta_out, dtype=float)
    mass = q_in.sum() - q_out.sum()
    sp_in, _ = smax_d(q_in, delta)
    sm_in, _ = smin_d(q_in, delta)
    sp_out, _ = smax_d(q_out, delta)
    sm_out, _ = smin_d(q_out, delta)
    energy = (np.sum(sp_in * theta_in + sm_in * theta_node)
              - np.sum(sp_out * theta_node + sm_out * theta_out))
    return float(mass), float(energy)


# ---------------------------------------------------------------------------
# state layout
# ---------------------------------------------------------------------------

class StateLayout:
    """Positions of the state blocks inside the flat state vector."""

    def __init__(self, n_edges: int, n_nodes: int, n_con: int):
        self.n_edges, self.n_nodes, self.n_con = n_edges, n_nodes, n_con
        o = 0
        self.q = slice(o, o + n_edges); o += n_edges
        self.p = slice(o, o + n_nodes); o += n_nodes
        self.theta_node = slice(o, o + n_nodes); o += n_nodes
        self.theta_edge = slice(o, o + n_edges); o += n_edges
        self.t2h = slice(o, o + n_con); o += n_con
        self.t2c = slice(o, o + n_con); o += n_con
        self.q_hs = slice(o, o + n_con); o += n_con
        self.n_x = o


@dataclass
class SolveReport:
    converged: bool = False
    iterations: int = 0
    residual_norm: float = np.inf
    stalled: bool = False
    regularized: bool = False
    reverse_consumer_flow: tuple = ()


@dataclass
class PeriodState:
    """Converged (or best-iterate) physical state of one period."""
    layout: StateLayout
    x: np.ndarray
    report: SolveReport = field(default_factory=SolveReport)

    @property
    def q(self):
        return self.x[self.layout.q]

    @property
    def p(self):
        return self.x[self.layout.p]

    @property
    def theta_node(self):
        return self.x[self.layout.theta_node]

    @property
    def theta_edge(self):
        return self.x[self.layout.theta_edge]

    @property
    def t2h(self):
        return self.x[self.layout.t2h]

    @property
    def t2c(self):
        return self.x[self.layout.t2c]

    @property
    def q_hs(self):
        return self.x[self.layout.q_hs]

    def copy(self) -> "PeriodState":
        return PeriodState(self.layout, self.x.copy(), self.report)


# ---------------------------------------------------------------------------
# period model
# ---------------------------------------------------------------------------

class PeriodModel:
    """Residuals, Jacobians and Newton solve of one period.

    Bound to a validated graph, component specs, the design-vector layout
    and one period's operating data.  Instances are immutable and cheap;
    build one per period.
    """

    def __init__(self, graph, fluid: FluidProps, catalog, consumers, producers,
                 design_layout, period: PeriodData, t_index: int,
                 p0: float = DEFAULT_P0):
        self.g = graph
        self.fluid = fluid
        self.catalog = catalog
        self.consumers = tuple(consumers)
        self.producers = tuple(producers)
        self.dl = design_layout
        self.period = period
        self.t = t_index
        self.p0 = p0

        g = graph
        self.layout = StateLayout(g.n_edges, g.n_nodes, g.n_con)
        self.n_x = self.layout.n_x

        if len(self.consumers) != g.n_con or len(self.producers) != g.n_pr:
            raise HydronicsError("spec list lengths do not match the graph")
        if len(period.demand) != g.n_con:
            raise HydronicsError("period demand length does not match consumer count")

        rho, cp = fluid.rho, fluid.cp
        self.rho_cp = rho * cp

        # pipe constants
        self.pipe_tail = g.edge_tail[g.pipe_edges]
        self.pipe_head = g.edge_head[g.pipe_edges]
        self.pipe_len = g.pipe_length
        self.beta = (0.3164 * (np.pi * fluid.mu / (4.0 * rho)) ** 0.25
                     * 8.0 * rho / np.pi ** 2)

        # consumer constants (per period)
        self.con_tail = g.edge_tail[g.consumer_edges]
        self.con_head = g.edge_head[g.consumer_edges]
        self.ua = np.array([c.ua for c in self.consumers], dtype=float)
        self.zeta = np.array([c.zeta for c in self.consumers], dtype=float)
        if np.any(~np.isfinite(self.ua)) or np.any(~np.isfinite(self.zeta)):
            raise HydronicsError("consumer specs must be sized (ua, zeta) before solving")
        self.n_rad = np.array([c.n_radiator for c in self.consumers])
        self.q_peak = np.array([c.peak_demand for c in self.consumers])
        self.lmtd_nom = np.array([c.lmtd_radiator_nom for c in self.consumers])
        self.theta_house = np.array([c.t_house - period.t_ambient for c in self.consumers])
        self.demand = np.maximum(period.demand, DEMAND_FLOOR)
        self.q_sec = np.array([
            c.secondary_flow(dem, rho, cp)
            for c, dem in zip(self.consumers, self.demand)
        ])
        self.b_pos = np.maximum(self.q_sec, QPOS_EPS)

        # producer constants
        self.pr_tail = g.edge_tail[g.producer_edges]
        self.pr_head = g.edge_head[g.producer_edges]
        self.theta_supply = np.array([p.supply_temp - period.t_ambient for p in self.producers])
        if period.availability is None:
            self.avail = np.ones(g.n_pr)
        else:
            if len(period.availability) != g.n_pr:
                raise HydronicsError("availability mask length does not match producers")
            self.avail = period.availability.astype(float)

        self._build_rows()
        self._merit_scale = self._build_merit_scale()

    # -- residual row layout -------------------------------------------
    def _build_rows(self):
        g = self.g
        o = 0
        self.rows_mom = np.arange(o, o + g.n_pipe); o += g.n_pipe
        self.rows_pen = np.arange(o, o + g.n_pipe); o += g.n_pipe
        mass_nodes = np.array([n for n in range(g.n_nodes) if n != g.ref_node], dtype=int)
        self.mass_nodes = mass_nodes
        self.mass_row_of_node = np.full(g.n_nodes, -1, dtype=int)
        self.mass_row_of_node[mass_nodes] = np.arange(o, o + len(mass_nodes))
        o += len(mass_nodes)
        self.rows_jen_base = o
        self.jen_row_of_node = np.arange(o, o + g.n_nodes)
        o += g.n_nodes
        self.rows_valve = np.arange(o, o + g.n_con); o += g.n_con
        self.rows_hx1 = np.arange(o, o + g.n_con); o += g.n_con
        self.rows_hx2 = np.arange(o, o + g.n_con); o += g.n_con
        self.rows_hx3 = np.arange(o, o + g.n_con); o += g.n_con
        self.rows_rad = np.arange(o, o + g.n_con); o += g.n_con
        self.rows_prq = np.arange(o, o + g.n_pr); o += g.n_pr
        self.rows_prt = np.arange(o, o + g.n_pr); o += g.n_pr
        self.row_ref = o; o += 1
        if o != self.n_x:
            raise HydronicsError("residual/state dimension mismatch")
        self.degree = np.array([len(g.in_edges[n]) + len(g.out_edges[n])
                                for n in range(g.n_nodes)], dtype=float)

    def _build_merit_scale(self):
        """Characteristic magnitude per residual row, for the line-search
        merit only (convergence is tested on the raw residuals)."""
        s = np.ones(self.n_x)
        q_scale = max(1e-4, float(np.sum(self.q_sec)))
        t_scale = 50.0
        e_scale = q_scale * t_scale
        s[self.rows_mom] = 1.0e5
        s[self.rows_pen] = t_scale
        s[self.mass_row_of_node[self.mass_nodes]] = q_scale
        s[self.jen_row_of_node] = e_scale
        s[self.rows_valve] = np.maximum(self.q_sec, 1e-6)
        w_scale = np.maximum(self.demand, 1e3)
        s[self.rows_hx1] = w_scale
        s[self.rows_hx2] = w_scale
        s[self.rows_hx3] = w_scale
        s[self.rows_rad] = w_scale
        s[self.rows_prq] = q_scale
        s[self.rows_prt] = t_scale
        s[self.row_ref] = 1.0e5
        return s

    # -- design slices ----------------------------------------------------
    def _design_parts(self, design: np.ndarray):
        d = design[self.dl.d_slice()]
        alpha = design[self.dl.alpha_slice(self.t)]
        gamma = design[self.dl.gamma_slice(self.t)]
        return d, alpha, gamma

    # -- pipe building blocks ----------------------------------------------
    def _pipe_terms(self, q_pipe, d):
        s, ds = sabs_d(q_pipe)
        b = self.beta * self.pipe_len * d ** -4.75
        dp = b * s ** 0.75 * q_pipe
        ddp_dq = b * s ** 0.75 * (1.0 + 0.75 * q_pipe * q_pipe / (s * s))
        ddp_dd = -4.75 * dp / d
        r = (np.log(4.0 * self.fluid.depth / (self.catalog.insulation_ratio * d))
             / (2.0 * np.pi * self.fluid.lambda_g)
             + np.log(self.catalog.insulation_ratio) / (2.0 * np.pi * self.fluid.lambda_i))
        dr_dd = -1.0 / (2.0 * np.pi * self.fluid.lambda_g * d)
        tau = self.pipe_len / (self.rho_cp * s * r)
        decay = np.exp(-tau)
        ddecay_dq = decay * tau * ds / s
        ddecay_dd = decay * tau * dr_dd / r
        return s, ds, dp, ddp_dq, ddp_dd, decay, ddecay_dq, ddecay_dd

    # -- consumer heat-exchanger terms --------------------------------------
    def _hx_terms(self, q_con):
        """epsilon * C_min (W/K) of each substation and d/dq, plus eps, C*."""
        a, da = smax_d(q_con)
        a = a + QPOS_EPS
        b = self.b_pos
        m_raw, dm_da, _ = smin2_d(a, b)
        mm, dmm = smax_d(m_raw, CMIN_DELTA)
        m = mm + CMIN_EPS
        dm_dq = dmm * dm_da * da
        big, dbig_da, _ = smax2_d(a, b)
        dbig_dq = dbig_da * da
        c_min = self.rho_cp * m
        ntu = self.ua / c_min
        c_star = m / big
        dntu_dq = -self.ua / (self.rho_cp * m * m) * dm_dq
        dcs_dq = dm_dq / big - m / (big * big) * dbig_dq
        eps, de_dn, de_dc = _effectiveness_d(ntu, c_star)
        g_val = eps * c_min
        dg_dq = self.rho_cp * dm_dq * eps + c_min * (de_dn * dntu_dq + de_dc * dcs_dq)
        return g_val, dg_dq, eps, c_star

    def _radiator_terms(self, t2h, t2c):
        """Radiator heat output Q(theta_2h, theta_2c) and its partials."""
        a_arg, da_arg = sfloor_d(t2h - self.theta_house, LMTD_FLOOR, LMTD_FLOOR_DELTA)
        b_arg, db_arg = sfloor_d(t2c - self.theta_house, LMTD_FLOOR, LMTD_FLOOR_DELTA)
        lm, dlm_da, dlm_db = _lmtd_d(a_arg, b_arg)
        ratio = lm / self.lmtd_nom
        g_val = self.q_peak * ratio ** self.n_rad
        dg_dlm = self.n_rad * g_val / lm
        return g_val, dg_dlm * dlm_da * da_arg, dg_dlm * dlm_db * db_arg

    # -- residuals ---------------------------------------------------------
    def residuals(self, design: np.ndarray, x: np.ndarray) -> np.ndarray:
        g, L = self.g, self.layout
        d, alpha, gamma = self._design_parts(design)
        q = x[L.q]
        p = x[L.p]
        tn = x[L.theta_node]
        te = x[L.theta_edge]
        t2h = x[L.t2h]
        t2c = x[L.t2c]
        qhs = x[L.q_hs]
        r = np.zeros(self.n_x)

        # pipes
        qp = q[g.pipe_edges]
        s, ds, dp, _, _, decay, _, _ = self._pipe_terms(qp, d)
        sp, _ = smax_d(qp)
        sm, _ = smin_d(qp)
        w_up = (sp * tn[self.pipe_tail] - sm * tn[self.pipe_head]) / s
        r[self.rows_mom] = p[self.pipe_tail] - p[self.pipe_head] - dp
        r[self.rows_pen] = te[g.pipe_edges] - w_up * decay

        # junction mass / energy
        mass = np.zeros(g.n_nodes)
        np.add.at(mass, g.edge_head, q)
        np.add.at(mass, g.edge_tail, -q)
        r[self.mass_row_of_node[self.mass_nodes]] = mass[self.mass_nodes]

        spq, _ = smax_d(q)
        smq, _ = smin_d(q)
        jen = THETA_REG * tn.copy()
        np.add.at(jen, g.edge_head, spq * te + smq * tn[g.edge_head])
        np.add.at(jen, g.edge_tail, -(spq * tn[g.edge_tail] + smq * te))
        reg = THETA_REG / self.degree
        np.add.at(jen, g.edge_head, -reg[g.edge_head] * te)
        np.add.at(jen, g.edge_tail, -reg[g.edge_tail] * te)
        r[self.jen_row_of_node] = jen

        # consumers
        qc = q[g.consumer_edges]
        dp_con = p[self.con_tail] - p[self.con_head]
        root, _ = ssqrt_d(dp_con)
        g_hx, _, _, _ = self._hx_terms(qc)
        tin = tn[self.con_tail]
        tec = te[g.consumer_edges]
        rad, _, _ = self._radiator_terms(t2h, t2c)
        r[self.rows_valve] = qc - alpha * self.zeta * root
        r[self.rows_hx1] = self.rho_cp * qc * (tin - tec) - g_hx * (tin - t2c)
        r[self.rows_hx2] = g_hx * (tin - t2c) - self.rho_cp * self.q_sec * (t2h - t2c)
        r[self.rows_hx3] = self.rho_cp * self.q_sec * (t2h - t2c) - qhs
        r[self.rows_rad] = qhs - rad

        # producers and reference pressure
        r[self.rows_prq] = q[g.producer_edges] - gamma * self.avail
        r[self.rows_prt] = te[g.producer_edges] - self.theta_supply
        r[self.row_ref] = p[g.ref_node] - self.p0
        return r

    # -- state Jacobian ------------------------------------------------------
    def state_jacobian(self, design: np.ndarray, x: np.ndarray) -> sp.csc_matrix:
        g, L = self.g, self.layout
        d, alpha, _ = self._design_parts(design)
        q = x[L.q]
        p = x[L.p]
        tn = x[L.theta_node]
        te = x[L.theta_edge]
        t2h = x[L.t2h]
        t2c = x[L.t2c]

        iq = L.q.start
        ip = L.p.start
        itn = L.theta_node.start
        ite = L.theta_edge.start
        i2h = L.t2h.start
        i2c = L.t2c.start
        ihs = L.q_hs.start

        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(np.asarray(r, dtype=int))
            cols.append(np.asarray(c, dtype=int))
            vals.append(np.asarray(v, dtype=float))

        # pipe momentum
        qp = q[g.pipe_edges]
        s, ds, dp, ddp_dq, _, decay, ddecay_dq, _ = self._pipe_terms(qp, d)
        add(self.rows_mom, ip + self.pipe_tail, np.ones(g.n_pipe))
        add(self.rows_mom, ip + self.pipe_head, -np.ones(g.n_pipe))
        add(self.rows_mom, iq + g.pipe_edges, -ddp_dq)

        # pipe energy
        sp_p, dsp_p = smax_d(qp)
        sm_p, dsm_p = smin_d(qp)
        w_up = (sp_p * tn[self.pipe_tail] - sm_p * tn[self.pipe_head]) / s
        dw_dq = ((dsp_p * tn[self.pipe_tail] - dsm_p * tn[self.pipe_head]) / s
                 - w_up * ds / s)
        add(self.rows_pen, ite + g.pipe_edges, np.ones(g.n_pipe))
        add(self.rows_pen, itn + self.pipe_tail, -(sp_p / s) * decay)
        add(self.rows_pen, itn + self.pipe_head, (sm_p / s) * decay)
        add(self.rows_pen, iq + g.pipe_edges, -(dw_dq * decay + w_up * ddecay_dq))

        # junction mass (all edges; rows of the reference node are dropped)
        mrow_h = self.mass_row_of_node[g.edge_head]
        mrow_t = self.mass_row_of_node[g.edge_tail]
        keep = mrow_h >= 0
        add(mrow_h[keep], iq + np.arange(g.n_edges)[keep], np.ones(keep.sum()))
        keep = mrow_t >= 0
        add(mrow_t[keep], iq + np.arange(g.n_edges)[keep], -np.ones(keep.sum()))

        # junction energy
        spq, dspq = smax_d(q)
        smq, dsmq = smin_d(q)
        all_e = np.arange(g.n_edges)
        jr_h = self.jen_row_of_node[g.edge_head]
        jr_t = self.jen_row_of_node[g.edge_tail]
        reg = THETA_REG / self.degree
        add(jr_h, iq + all_e, dspq * te + dsmq * tn[g.edge_head])
        add(jr_h, ite + all_e, spq - reg[g.edge_head])
        add(jr_h, itn + g.edge_head, smq)
        add(jr_t, iq + all_e, -(dspq * tn[g.edge_tail] + dsmq * te))
        add(jr_t, ite + all_e, -smq - reg[g.edge_tail])
        add(jr_t, itn + g.edge_tail, -spq)
        add(self.jen_row_of_node, itn + np.arange(g.n_nodes), np.full(g.n_nodes, THETA_REG))

        # consumers
        qc = q[g.consumer_edges]
        dp_con = p[self.con_tail] - p[self.con_head]
        root, droot = ssqrt_d(dp_con)
        g_hx, dg_dq, _, _ = self._hx_terms(qc)
        tin = tn[self.con_tail]
        tec = te[g.consumer_edges]
        cons = np.arange(g.n_con)
        add(self.rows_valve, iq + g.consumer_edges, np.ones(g.n_con))
        add(self.rows_valve, ip + self.con_tail, -alpha * self.zeta * droot)
        add(self.rows_valve, ip + self.con_head, alpha * self.zeta * droot)

        add(self.rows_hx1, iq + g.consumer_edges,
            self.rho_cp * (tin - tec) - dg_dq * (tin - t2c))
        add(self.rows_hx1, itn + self.con_tail, self.rho_cp * qc - g_hx)
        add(self.rows_hx1, ite + g.consumer_edges, -self.rho_cp * qc)
        add(self.rows_hx1, i2c + cons, g_hx)

        add(self.rows_hx2, iq + g.consumer_edges, dg_dq * (tin - t2c))
        add(self.rows_hx2, itn + self.con_tail, g_hx)
        add(self.rows_hx2, i2c + cons, -g_hx + self.rho_cp * self.q_sec)
        add(self.rows_hx2, i2h + cons, -self.rho_cp * self.q_sec)

        add(self.rows_hx3, i2h + cons, self.rho_cp * self.q_sec)
        add(self.rows_hx3, i2c + cons, -self.rho_cp * self.q_sec)
        add(self.rows_hx3, ihs + cons, -np.ones(g.n_con))

        _, drad_2h, drad_2c = self._radiator_terms(t2h, t2c)
        add(self.rows_rad, ihs + cons, np.ones(g.n_con))
        add(self.rows_rad, i2h + cons, -drad_2h)
        add(self.rows_rad, i2c + cons, -drad_2c)

        # producers + reference pressure
        add(self.rows_prq, iq + g.producer_edges, np.ones(g.n_pr))
        add(self.rows_prt, ite + g.producer_edges, np.ones(g.n_pr))
        add([self.row_ref], [ip + g.ref_node], [1.0])

        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        return sp.coo_matrix((vals, (rows, cols)), shape=(self.n_x, self.n_x)).tocsc()

    # -- design Jacobian -----------------------------------------------------
    def design_jacobian(self, design: np.ndarray, x: np.ndarray) -> sp.csc_matrix:
        """Sparse d residual / d design over the full flat design vector."""
        g, L = self.g, self.layout
        d, alpha, _ = self._design_parts(design)
        q = x[L.q]
        p = x[L.p]
        tn = x[L.theta_node]

        qp = q[g.pipe_edges]
        s, _, dp, _, ddp_dd, decay, _, ddecay_dd = self._pipe_terms(qp, d)
        sp_p, _ = smax_d(qp)
        sm_p, _ = smin_d(qp)
        w_up = (sp_p * tn[self.pipe_tail] - sm_p * tn[self.pipe_head]) / s

        d_cols = np.arange(self.dl.d_slice().start, self.dl.d_slice().stop)
        a_cols = np.arange(self.dl.alpha_slice(self.t).start, self.dl.alpha_slice(self.t).stop)
        g_cols = np.arange(self.dl.gamma_slice(self.t).start, self.dl.gamma_slice(self.t).stop)

        dp_con = p[self.con_tail] - p[self.con_head]
        root, _ = ssqrt_d(dp_con)

        rows = np.concatenate([self.rows_mom, self.rows_pen, self.rows_valve, self.rows_prq])
        cols = np.concatenate([d_cols, d_cols, a_cols, g_cols])
        vals = np.concatenate([
            -ddp_dd,
            -w_up * ddecay_dd,
            -self.zeta * root,
            -self.avail,
        ])
        return sp.coo_matrix((vals, (rows, cols)), shape=(self.n_x, self.dl.n_total)).tocsc()

    # -- diagnostics --------------------------------------------------------
    def producer_heat(self, state: PeriodState) -> np.ndarray:
        """Heat input of each producer, W."""
        q = state.q[self.g.producer_edges]
        return self.rho_cp * q * (state.theta_edge[self.g.producer_edges]
                                  - state.theta_node[self.pr_tail])

    def producer_pressure_rise(self, state: PeriodState) -> np.ndarray:
        return state.p[self.pr_head] - state.p[self.pr_tail]

    def pump_power(self, state: PeriodState) -> np.ndarray:
        """Hydraulic pump power of each producer, W."""
        return self.producer_pressure_rise(state) * state.q[self.g.producer_edges]

    def pipe_losses(self, state: PeriodState) -> np.ndarray:
        """Heat lost by each pipe, W (smoothed upwind convention)."""
        qp = state.q[self.g.pipe_edges]
        s, _ = sabs_d(qp)
        sp_p, _ = smax_d(qp)
        sm_p, _ = smin_d(qp)
        w_up = (sp_p * state.theta_node[self.pipe_tail]
                - sm_p * state.theta_node[self.pipe_head]) / s
        return self.rho_cp * s * (w_up - state.theta_edge[self.g.pipe_edges])

    def consumer_effectiveness(self, state: PeriodState):
        _, _, eps, c_star = self._hx_terms(state.q[self.g.consumer_edges])
        return eps, c_star

    # -- initial state -------------------------------------------------------
    def initial_state(self, design: np.ndarray) -> np.ndarray:
        g, L = self.g, self.layout
        _, _, gamma = self._design_parts(design)
        x = np.zeros(self.n_x)
        x[L.p] = self.p0

        t_feed = float(np.max(self.theta_supply)) if g.n_pr else 40.0
        t_ret = float(np.mean([c.t1_cold_nom for c in self.consumers])) - self.period.t_ambient \
            if self.consumers else 0.5 * t_feed
        tn = np.where(g.node_side > 0, t_feed,
                      np.where(g.node_side < 0, t_ret, 0.5 * (t_feed + t_ret)))
        x[L.theta_node] = tn

        # nominal primary flows, scaled to match the imposed producer flow
        q_pr = gamma * self.avail
        q_nom = self.demand / (self.rho_cp * np.array(
            [c.t1_hot_nom - c.t1_cold_nom for c in self.consumers]))
        tot = q_nom.sum()
        q_con = q_nom * (q_pr.sum() / tot) if tot > 0 else np.zeros(g.n_con)

        q = np.zeros(g.n_edges)
        q[g.producer_edges] = q_pr
        q[g.consumer_edges] = q_con
        # distribute the imposed flows over the pipes: least-squares mass balance
        if g.n_pipe:
            inj = np.zeros(g.n_nodes)
            fixed = np.concatenate([g.producer_edges, g.consumer_edges])
            np.add.at(inj, g.edge_head[fixed], q[fixed])
            np.add.at(inj, g.edge_tail[fixed], -q[fixed])
            rows = np.concatenate([self.pipe_head, self.pipe_tail])
            cols = np.concatenate([np.arange(g.n_pipe)] * 2)
            vals = np.concatenate([np.ones(g.n_pipe), -np.ones(g.n_pipe)])
            a_mat = sp.coo_matrix((vals, (rows, cols)), shape=(g.n_nodes, g.n_pipe)).tocsr()
            q[g.pipe_edges] = lsqr(a_mat, -inj, atol=1e-12, btol=1e-12)[0]

        x[L.q] = q
        te = np.where(np.isin(np.arange(g.n_edges), g.producer_edges), 0.0, tn[g.edge_tail])
        te[g.producer_edges] = self.theta_supply
        te[g.consumer_edges] = t_ret
        x[L.theta_edge] = te
        x[L.t2h] = np.array([c.t2_hot_nom for c in self.consumers]) - self.period.t_ambient
        x[L.t2c] = np.array([c.t2_cold_nom for c in self.consumers]) - self.period.t_ambient
        x[L.q_hs] = self.demand
        return x

    # -- Newton solve ---------------------------------------------------------
    def solve(self, design: np.ndarray, x0: Optional[np.ndarray] = None,
              tol: float = 1e-9, max_iter: int = 100,
              theta_step_cap: float = 20.0) -> PeriodState:
        """Damped Newton iteration on the residual system.

        Armijo backtracking on the scaled least-squares merit, with the
        temperature update per iteration capped at ``theta_step_cap`` K.
        """
        L = self.layout
        x = self.initial_state(design) if x0 is None else np.array(x0, dtype=float)
        report = SolveReport()
        inv_scale = 1.0 / self._merit_scale

        def merit(r):
            rs = r * inv_scale
            return 0.5 * float(rs @ rs)

        r = self.residuals(design, x)
        rn = float(np.max(np.abs(r)))
        m0 = merit(r)
        for it in range(max_iter):
            if rn <= tol:
                report.converged = True
                break
            jac = self.state_jacobian(design, x)
            try:
                lu = splu(jac)
            except RuntimeError:
                diag_scale = float(np.mean(np.abs(jac.diagonal()))) or 1.0
                jac = jac + sp.identity(self.n_x, format="csc") * (1e-12 * diag_scale)
                lu = splu(jac)
                report.regularized = True
            dx = -lu.solve(r)
            if not np.all(np.isfinite(dx)):
                report.stalled = True
                break
            dth = max(
                float(np.max(np.abs(dx[L.theta_node]))) if L.theta_node.stop > L.theta_node.start else 0.0,
                float(np.max(np.abs(dx[L.theta_edge]))) if self.g.n_edges else 0.0,
            )
            if dth > theta_step_cap:
                dx *= theta_step_cap / dth
            step, accepted = 1.0, False
            for _ in range(40):
                x_try = x + step * dx
                r_try = self.residuals(design, x_try)
                m_try = merit(r_try)
                if np.isfinite(m_try) and m_try <= m0 * (1.0 - 1e-4 * step):
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                report.stalled = True
                break
            x, r, m0 = x_try, r_try, m_try
            rn = float(np.max(np.abs(r)))
            report.iterations = it + 1
        else:
            report.converged = rn <= tol

        report.residual_norm = rn
        if rn <= tol:
            report.converged = True
        state = PeriodState(self.layout, x, report)
        rev = np.nonzero(state.q[self.g.consumer_edges] < -1e-9)[0]
        report.reverse_consumer_flow = tuple(int(i) for i in rev)
        return state


def solve_period(graph, fluid, catalog, consumers, producers, design_layout,
                 design, period, t_index, init=None, **kwargs) -> PeriodState:
    """Convenience wrapper: build the period model and solve it."""
    model = PeriodModel(graph, fluid, catalog, consumers, producers,
                        design_layout, period, t_index)
    return model.solve(np.asarray(design, dtype=float), x0=init, **kwargs)
