"""Stage orchestration: critical -> flow -> strata -> tower -> homology.

Every stage memoizes its artifacts on the pipeline object and contributes a
JSON-able check report.  Execution is sequential and deterministic for a
fixed scenario and seed; MORSE_CELLS_THREADS is honored as an upper bound on
parallelism (this implementation runs single-threaded, which trivially
respects any cap and keeps reports byte-identical).
"""

from __future__ import annotations

import os

import numpy as np

from .config import Scenario, ScenarioError
from .critical import attach_charts, find_critical_points
from .expr import ScalarExpression
from .field import (ScalarField, box_domain, check_gradientlike,
                    make_gradientlike, sphere_domain, torus_domain)
from .flow import check_morse_smale, omega_partition, shoot_saddle_connections
from .homology import boundary_maps, count_connecting_orbits, homology_report
from .integrators import StepControls
from .strata import (build_strata, check_frontier_order,
                     prepare_frontier_samples, assert_frontier_f_graded)
from .thom import build_thom_data, check_rho_flow_monotone, check_thom_axioms
from .tower import (build_tower, check_delta_independence,
                    check_flow_transversality, realize, validate_tower,
                    TowerRefusedError)
from .whitney import check_whitney


def _domain_for(scenario: Scenario):
    kind, _, arg = scenario.surface.partition(":")
    if kind == "sphere":
        return sphere_domain()
    if kind == "torus":
        return torus_domain(2.0, 1.0)
    if kind == "implicit":
        if not arg:
            raise ScenarioError("implicit surface needs an expression")
        from .field import Domain
        g = ScalarExpression(arg, 3)
        return Domain("implicit", 3, constraint=g,
                      box=[[-4.0] * 3, [4.0] * 3])
    if kind == "box-sublevel":
        level = float(arg) if arg else 0.5
        return box_domain([[-1.0, -1.0], [1.0, 1.0]], sublevel=level)
    raise ScenarioError(f"unknown surface {scenario.surface!r}")


def _function_for(scenario: Scenario, dom):
    if scenario.function:
        return ScalarExpression(scenario.function, dom.ambient_dim)
    if dom.ambient_dim != 3:
        raise ScenarioError("box scenarios need an explicit function")
    t = scenario.tilt
    return ScalarExpression(f"cos({t!r})*z + sin({t!r})*y", 3)


class Pipeline:
    """Lazy scenario pipeline; stage methods return JSON-able reports."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario.validate()
        self.domain = _domain_for(scenario)
        self.field = ScalarField(_function_for(scenario, self.domain), self.domain)
        self.v = make_gradientlike(self.field, eta=scenario.eta,
                                   seed=scenario.seed)
        self.controls = StepControls(rtol=scenario.flow_rtol,
                                     atol=scenario.flow_atol,
                                     max_steps=scenario.flow_max_steps)
        self.cps = None
        self.strata = None
        self.frontier = None
        self.ms = None
        self.tubes = None
        self.tower_obj = None
        self.realization = None
        self.reports = {}

    # -- stages --------------------------------------------------------------

    def stage_critical(self):
        if "critical" in self.reports:
            return self.reports["critical"]
        sc = self.scenario
        self.cps = find_critical_points(self.v, grid_density=sc.grid_density,
                                        newton_tol=sc.newton_tol)
        attach_charts(self.v, self.cps)
        grad_report = check_gradientlike(self.v, grid_density=max(24, sc.grid_density))
        report = {
            "stage": "critical",
            "pass": bool(grad_report["pass"] and len(self.cps) > 0),
            "critical_points": [{
                "id": cp.id,
                "location": [float(c) for c in cp.location],
                "value": float(cp.value),
                "index": int(cp.index),
                "eigenvalues": [float(l) for l in cp.eigenvalues],
                "chart_radius": float(cp.chart_radius),
                "normal_form_residual": float(cp.chart.normal_form_residual()),
            } for cp in self.cps],
            "counts_by_index": self.critical_counts(),
            "gradientlike": grad_report,
        }
        self.reports["critical"] = report
        return report

    def critical_counts(self):
        n_int = 2 if self.domain.kind == "implicit" else self.domain.ambient_dim
        counts = [0] * (n_int + 1)
        for cp in self.cps:
            counts[cp.index] += 1
        return counts

    def stage_morse_smale(self):
        if "morse-smale" in self.reports:
            return self.reports["morse-smale"]
        self.stage_critical()
        ms = check_morse_smale(self.v, self.cps, controls=self.controls)
        shots = shoot_saddle_connections(self.v, self.cps, controls=self.controls)
        ms["shooting_connections"] = shots
        ms["pass"] = bool(ms["pass"] and not shots)
        self.ms = ms
        report = {"stage": "morse-smale", "pass": ms["pass"], "report": ms}
        self.reports["morse-smale"] = report
        return report

    def _ensure_strata(self):
        if self.strata is None:
            self.stage_morse_smale()
            self.strata = build_strata(self.v, self.cps, controls=self.controls)
            radius = 0.01 * self.domain.diameter()
            prepare_frontier_samples(self.v, self.strata, radius,
                                     seed=self.scenario.seed)
            self.frontier = check_frontier_order(self.strata, radius)
            assert_frontier_f_graded(self.strata, self.cps, self.frontier)
        return self.strata

    def stage_whitney(self, sequences=1000):
        if "whitney" in self.reports:
            return self.reports["whitney"]
        self._ensure_strata()
        by_id = {st.id: st for st in self.strata}
        diam = self.domain.diameter()
        pair_reports = []
        ok = self.frontier["pass"]
        for S in self.strata:
            for t_id in sorted(S.order):
                rep = check_whitney(by_id[t_id], S, sequences=sequences,
                                    seed=self.scenario.seed, diameter=diam)
                rep["T"] = t_id
                rep["S"] = S.id
                ok = ok and rep["pass"]
                pair_reports.append(rep)
        report = {"stage": "whitney", "pass": bool(ok),
                  "frontier": self.frontier, "pairs": pair_reports}
        self.reports["whitney"] = report
        return report

    def _ensure_tubes(self):
        if self.tubes is None:
            self._ensure_strata()
            if not self.ms["pass"]:
                raise TowerRefusedError(
                    "Morse-Smale transversality failed; tube construction refused "
                    f"(connecting orbits: {self.ms.get('connecting_orbits')})")
            self.tubes = build_thom_data(self.v, self.cps, self.strata,
                                         ms_report=self.ms)
        return self.tubes

    def stage_tower(self, delta_check=None):
        if "tower" in self.reports and delta_check is None:
            return self.reports["tower"]
        self._ensure_tubes()
        sc = self.scenario
        axioms = check_thom_axioms(self.v, self.tubes, self.strata,
                                   seed=sc.seed)
        monotone = check_rho_flow_monotone(self.v, self.tubes, self.strata,
                                           seed=sc.seed)
        self.tower_obj = build_tower(self.v, self.cps, self.strata, self.tubes,
                                     ms_report=self.ms, mesh_edge=sc.mesh_edge,
                                     delta_factor=sc.delta_factor)
        violations = validate_tower(self.tower_obj)
        transversality = check_flow_transversality(self.tower_obj, self.v,
                                                   self.tubes)
        report = {
            "stage": "tower",
            "thom_axioms": axioms,
            "rho_monotone": monotone,
            "violations": violations,
            "membership": self.tower_obj.meta["membership"],
            "flow_transversality": transversality,
            "pieces": {str(sid): {"dim": p.dim, "vertices": p.n_vertices(),
                                  "faces": len(p.faces)}
                       for sid, p in sorted(self.tower_obj.pieces.items())},
            "tubes": {str(sid): {"gamma": float(t.gamma),
                                 "delta": float(sc.delta_factor * t.gamma)}
                      for sid, t in sorted(self.tubes.items())},
        }
        if delta_check is not None:
            same, delta_rep = check_delta_independence(
                self.v, self.cps, self.strata, self.tubes,
                factors=delta_check, mesh_edge=sc.mesh_edge, ms_report=self.ms)
            delta_rep.pop("towers", None)
            report["delta_independence"] = {"agree": bool(same), **delta_rep}
        report["pass"] = bool(axioms["pass"] and monotone["pass"]
                              and not violations and transversality["pass"]
                              and self.tower_obj.meta["membership"]["pass"]
                              and report.get("delta_independence",
                                             {"agree": True})["agree"])
        self.reports["tower"] = report
        return report

    def stage_homology(self):
        if "homology" in self.reports:
            return self.reports["homology"]
        self.stage_tower()
        if self.realization is None:
            self.realization = realize(self.tower_obj)
        orbit_counts = count_connecting_orbits(self.v, self.cps,
                                               controls=self.controls)
        cw = boundary_maps(self.realization, self.cps, orbit_counts)
        hom = homology_report(cw, self.critical_counts())
        report = {
            "stage": "homology",
            "pass": bool(hom["pass"] and not self.realization.flagged),
            "cells_by_dim": {str(k): c for k, c in
                             sorted(self.realization.cells_by_dim.items())},
            "quotient_chi": self.realization.quotient_chi,
            "disc_certificates": self.realization.disc_certificates,
            "orbit_counts": {f"{p},{q}": int(c)
                             for (p, q), c in sorted(orbit_counts.items())},
            "boundary_matrices": [B.tolist() for B in cw.boundary],
            "homology": hom,
        }
        self.reports["homology"] = report
        return report

    def stage_partition(self, n_points=300):
        self.stage_critical()
        return omega_partition(self.v, self.cps, n_points=n_points,
                               seed=self.scenario.seed, controls=self.controls)

    def run(self, stage):
        """Run one pipeline stage (with its dependencies) by CLI name."""
        if stage == "critical":
            return self.stage_critical()
        if stage == "morse-smale":
            return self.stage_morse_smale()
        if stage == "whitney":
            return self.stage_whitney()
        if stage == "tower":
            return self.stage_tower()
        if stage == "homology":
            return self.stage_homology()
        raise ValueError(f"unknown stage {stage!r}")


def threads_cap():
    raw = os.environ.get("MORSE_CELLS_THREADS")
    if raw is None:
        return None
    try:
        return max(1, int(raw))
    except ValueError:
        return None
