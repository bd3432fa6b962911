"""Discounted lifetime cost and the state-constraint families.

Objective:

    J = J_pipe_capex(d) + J_heat_capex(phi)
        + f_OP * sum_t omega_t [J_heat_opex_t + J_pump_opex_t]

with the annuity factor f_OP = sum_{k=1..A} (1+e)^-k.  Pipe investment uses
the penalized fixed cost

    kbar0(d) = kappa0 * (2 / (1 + exp(-xi (d - d_min))) - 1)

so that intermediate diameters below the smallest commercial size lose their
volumetric efficiency and the optimizer is driven to a near-discrete design.
With `offset` enabled the constant kappa0/2 per meter is added, making a
removed pipe cost ~0 and an installed one ~ (kappa0 + kappa1 d) L; the offset
shifts the objective by a design-independent constant and cannot change any
optimizer decision.

Internally everything is SI (W, Pa, m^3/s); euros enter through prices per
kWh combined with the annual active hours K.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

W_PER_KW = 1000.0


class CostError(ValueError):
    pass


def annuity_factor(horizon_years: float, discount_rate: float) -> float:
    """Closed form of sum_{k=1..A} (1+e)^-k; equals A when e = 0."""
    if horizon_years < 1:
        raise CostError("investment horizon must be at least one year")
    if discount_rate < 0.0:
        raise CostError("discount rate must be non-negative")
    if discount_rate == 0.0:
        return float(horizon_years)
    return (1.0 - (1.0 + discount_rate) ** -horizon_years) / discount_rate


@dataclass(frozen=True)
class EconomicParams:
    horizon_years: float = 30.0
    discount_rate: float = 0.05
    kappa0: float = 501.3          # fixed pipe cost, euro/m
    kappa1: float = 1976.3         # diameter-proportional pipe cost, euro/m^2
    xi: float = 50.0               # fixed-cost penalization parameter, 1/m
    pump_price: float = 0.1        # electricity price, euro/kWh
    dp_max: float = 1.0e6          # maximum producer pressure rise, Pa
    active_hours: float = 8760.0   # K, h/yr
    pipe_cost_offset: bool = True

    @property
    def f_op(self) -> float:
        return annuity_factor(self.horizon_years, self.discount_rate)


@dataclass
class CostBreakdown:
    pipe_capex: float = 0.0
    heat_capex: float = 0.0
    heat_opex: float = 0.0      # discounted, euro
    pump_opex: float = 0.0      # discounted, euro
    heat_opex_periods: list = field(default_factory=list)  # euro/yr, undiscounted
    pump_opex_periods: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return self.pipe_capex + self.heat_capex + self.heat_opex + self.pump_opex

    def as_dict(self) -> dict:
        return {
            "pipe_capex": self.pipe_capex,
            "heat_capex": self.heat_capex,
            "heat_opex": self.heat_opex,
            "pump_opex": self.pump_opex,
            "total": self.total,
            "heat_opex_periods": list(self.heat_opex_periods),
            "pump_opex_periods": list(self.pump_opex_periods),
        }


# ---------------------------------------------------------------------------
# investment cost
# ---------------------------------------------------------------------------

def penalized_fixed_cost(d, kappa0: float, xi: float, d_min: float):
    """SINH-like penalized fixed cost kbar0(d); 0 at d_min, -> kappa0."""
    d = np.asarray(d, dtype=float)
    out = kappa0 * (2.0 / (1.0 + np.exp(-xi * (d - d_min))) - 1.0)
    return float(out) if out.ndim == 0 else out


def penalized_fixed_cost_grad(d, kappa0: float, xi: float, d_min: float):
    d = np.asarray(d, dtype=float)
    e = np.exp(-xi * (d - d_min))
    out = kappa0 * 2.0 * xi * e / (1.0 + e) ** 2
    return float(out) if out.ndim == 0 else out


def pipe_capex(d, lengths, econ: EconomicParams, d_min: float,
               offset: bool | None = None) -> float:
    """Investment cost of the candidate pipes, euro."""
    d = np.asarray(d, dtype=float)
    lengths = np.asarray(lengths, dtype=float)
    offset = econ.pipe_cost_offset if offset is None else offset
    per_m = econ.kappa1 * d + 0.5 * penalized_fixed_cost(d, econ.kappa0, econ.xi, d_min)
    if offset:
        per_m = per_m + 0.5 * econ.kappa0
    return float(np.sum(per_m * lengths))


def pipe_capex_grad(d, lengths, econ: EconomicParams, d_min: float) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    return (econ.kappa1 + 0.5 * penalized_fixed_cost_grad(d, econ.kappa0, econ.xi, d_min)) \
        * np.asarray(lengths, dtype=float)


def discrete_pipe_capex(d, lengths, econ: EconomicParams) -> float:
    """Catalog cost of a buildable design: installed pipes (d > 0) pay the
    full fixed cost, removed pipes pay nothing."""
    d = np.asarray(d, dtype=float)
    lengths = np.asarray(lengths, dtype=float)
    installed = d > 0.0
    return float(np.sum((econ.kappa0 + econ.kappa1 * d[installed]) * lengths[installed]))


def heat_capex(phi, producers: Sequence) -> float:
    """Capacity investment: sum phi (P_max C_prod1 + C_prod2), P_max in kW."""
    phi = np.asarray(phi, dtype=float)
    unit = np.array([p.p_max / W_PER_KW * p.cost_capacity + p.cost_fixed for p in producers])
    return float(np.sum(phi * unit))


def heat_capex_grad(producers: Sequence) -> np.ndarray:
    return np.array([p.p_max / W_PER_KW * p.cost_capacity + p.cost_fixed for p in producers])


# ---------------------------------------------------------------------------
# operating cost (per period, euro/yr, undiscounted)
# ---------------------------------------------------------------------------

def heat_opex_period(q_pr, dtheta_pr, phi, producers: Sequence, rho_cp: float,
                     active_hours: float) -> float:
    """Heat cost of one period: fuel (heat price times producer heat input
    divided by the producer efficiency) plus capacity-bound fixed O&M."""
    q_pr = np.asarray(q_pr, dtype=float)
    dtheta_pr = np.asarray(dtheta_pr, dtype=float)
    phi = np.asarray(phi, dtype=float)
    price = np.array([p.heat_price / p.eta_pr for p in producers])
    annual = np.array([p.cost_annual for p in producers])
    energy_kw = rho_cp * q_pr * dtheta_pr / W_PER_KW
    return float(np.sum(price * energy_kw * active_hours + phi * annual))


def pump_opex_period(q_pr, dp_pr, producers: Sequence, pump_price: float,
                     active_hours: float) -> float:
    """Pumping cost of one period from the producer pressure rises."""
    q_pr = np.asarray(q_pr, dtype=float)
    dp_pr = np.asarray(dp_pr, dtype=float)
    eta = np.array([p.eta_pump for p in producers])
    power_kw = dp_pr * q_pr / (eta * W_PER_KW)
    return float(np.sum(pump_price * power_kw * active_hours))


def total_cost(models: Sequence, design: np.ndarray, states: Sequence,
               econ: EconomicParams) -> CostBreakdown:
    """Discounted lifetime cost over all periods (one model/state each)."""
    if len(models) != len(states):
        raise CostError("one converged state per period is required")
    m0 = models[0]
    dl = m0.dl
    d = design[dl.d_slice()]
    phi = design[dl.phi_slice()]
    out = CostBreakdown(
        pipe_capex=pipe_capex(d, m0.g.pipe_length, econ, m0.catalog.d_min),
        heat_capex=heat_capex(phi, m0.producers),
    )
    f_op = econ.f_op
    for model, state in zip(models, states):
        q_pr = state.q[model.g.producer_edges]
        dtheta = (state.theta_edge[model.g.producer_edges]
                  - state.theta_node[model.pr_tail])
        h_op = heat_opex_period(q_pr, dtheta, phi, model.producers,
                                model.rho_cp, econ.active_hours)
        p_op = pump_opex_period(q_pr, model.producer_pressure_rise(state),
                                model.producers, econ.pump_price, econ.active_hours)
        out.heat_opex_periods.append(h_op)
        out.pump_opex_periods.append(p_op)
        w = model.period.weight
        out.heat_opex += f_op * w * h_op
        out.pump_opex += f_op * w * p_op
    return out


# ---------------------------------------------------------------------------
# state-dependent partial derivatives of the period operating cost
# ---------------------------------------------------------------------------

def opex_state_partial(model, state, econ: EconomicParams) -> np.ndarray:
    """d(heat_opex_t + pump_opex_t)/dx as a dense vector, euro/yr per unit."""
    g, L = model.g, model.layout
    out = np.zeros(model.n_x)
    q_pr = state.q[g.producer_edges]
    te = state.theta_edge[g.producer_edges]
    tn = state.theta_node[model.pr_tail]
    price = np.array([p.heat_price / p.eta_pr for p in model.producers])
    heat_fac = price * model.rho_cp * econ.active_hours / W_PER_KW
    out[L.q.start + g.producer_edges] += heat_fac * (te - tn)
    out[L.theta_edge.start + g.producer_edges] += heat_fac * q_pr
    np.add.at(out, L.theta_node.start + model.pr_tail, -heat_fac * q_pr)

    eta = np.array([p.eta_pump for p in model.producers])
    pump_fac = econ.pump_price * econ.active_hours / (eta * W_PER_KW)
    dp = state.p[model.pr_head] - state.p[model.pr_tail]
    out[L.q.start + g.producer_edges] += pump_fac * dp
    np.add.at(out, L.p.start + model.pr_head, pump_fac * q_pr)
    np.add.at(out, L.p.start + model.pr_tail, -pump_fac * q_pr)
    return out


def opex_design_partial(model, state, econ: EconomicParams) -> np.ndarray:
    """d(heat_opex_t + pump_opex_t)/d design (the phi O&M term)."""
    out = np.zeros(model.dl.n_total)
    out[model.dl.phi_slice()] = np.array([p.cost_annual for p in model.producers])
    return out


def capex_design_grad(model, design: np.ndarray, econ: EconomicParams) -> np.ndarray:
    """d(pipe_capex + heat_capex)/d design."""
    out = np.zeros(model.dl.n_total)
    d = design[model.dl.d_slice()]
    out[model.dl.d_slice()] = pipe_capex_grad(d, model.g.pipe_length, econ,
                                              model.catalog.d_min)
    out[model.dl.phi_slice()] = heat_capex_grad(model.producers)
    return out


# ---------------------------------------------------------------------------
# inequality constraints, h <= 0
# ---------------------------------------------------------------------------
# Per period: demand shortfall per consumer, producer pressure rise, producer
# capacity.  The scaled variant (pressure divided by dp_max) feeds the
# augmented Lagrangian so a single outer tolerance is meaningful across
# families; `constraint_values` reports the raw form.

def constraint_labels(model) -> list:
    lab = [f"demand:{model.g.edges[e].id}" for e in model.g.consumer_edges]
    lab += [f"pressure:{model.g.edges[e].id}" for e in model.g.producer_edges]
    lab += [f"capacity:{model.g.edges[e].id}" for e in model.g.producer_edges]
    return lab


def constraint_values(model, state, design: np.ndarray,
                      econ: EconomicParams, scaled: bool = False) -> np.ndarray:
    phi = design[model.dl.phi_slice()]
    demand = (model.demand - state.q_hs) / model.demand
    dp = model.producer_pressure_rise(state)
    pressure = dp - econ.dp_max
    if scaled:
        pressure = pressure / econ.dp_max
    q_pr = state.q[model.g.producer_edges]
    dtheta = state.theta_edge[model.g.producer_edges] - state.theta_node[model.pr_tail]
    eta = np.array([p.eta_pr for p in model.producers])
    p_max = np.array([p.p_max for p in model.producers])
    capacity = -phi + dtheta * q_pr * eta * model.rho_cp / p_max
    return np.concatenate([demand, pressure, capacity])


def constraint_state_partial(model, state, design: np.ndarray,
                             econ: EconomicParams) -> sp.csr_matrix:
    """Jacobian of the scaled constraints w.r.t. the state."""
    g, L = model.g, model.layout
    n_con, n_pr = g.n_con, g.n_pr
    n_h = n_con + 2 * n_pr
    rows, cols, vals = [], [], []

    r_dem = np.arange(n_con)
    rows.append(r_dem)
    cols.append(L.q_hs.start + np.arange(n_con))
    vals.append(-1.0 / model.demand)

    r_pre = n_con + np.arange(n_pr)
    rows.append(r_pre); cols.append(L.p.start + model.pr_head)
    vals.append(np.full(n_pr, 1.0 / econ.dp_max))
    rows.append(r_pre); cols.append(L.p.start + model.pr_tail)
    vals.append(np.full(n_pr, -1.0 / econ.dp_max))

    q_pr = state.q[g.producer_edges]
    dtheta = state.theta_edge[g.producer_edges] - state.theta_node[model.pr_tail]
    eta = np.array([p.eta_pr for p in model.producers])
    p_max = np.array([p.p_max for p in model.producers])
    fac = eta * model.rho_cp / p_max
    r_cap = n_con + n_pr + np.arange(n_pr)
    rows.append(r_cap); cols.append(L.q.start + g.producer_edges); vals.append(fac * dtheta)
    rows.append(r_cap); cols.append(L.theta_edge.start + g.producer_edges); vals.append(fac * q_pr)
    rows.append(r_cap); cols.append(L.theta_node.start + model.pr_tail); vals.append(-fac * q_pr)

    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_h, model.n_x)).tocsr()


def constraint_design_partial(model, state, design: np.ndarray,
                              econ: EconomicParams) -> sp.csr_matrix:
    """Jacobian of the scaled constraints w.r.t. the design (phi columns)."""
    g = model.g
    n_h = g.n_con + 2 * g.n_pr
    r_cap = g.n_con + g.n_pr + np.arange(g.n_pr)
    cols = np.arange(model.dl.phi_slice().start, model.dl.phi_slice().stop)
    return sp.coo_matrix((np.full(g.n_pr, -1.0), (r_cap, cols)),
                         shape=(n_h, model.dl.n_total)).tocsr()
