"""Scenario files: flat key = value text, '#' comments, no nesting."""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    surface: str = "sphere"       # sphere | torus | implicit:<g> | box-sublevel[:level]
    function: str = ""            # empty: height tilted by `tilt`
    tilt: float = 0.0
    eta: float = 0.0
    seed: int = 0
    grid_density: int = 12
    newton_tol: float = 1e-10
    flow_rtol: float = 1e-10
    flow_atol: float = 1e-12
    flow_max_steps: int = 1_000_000
    mesh_edge: float = 0.02
    delta_factor: float = 0.5
    output_dir: str = "morse-cells-out"

    def validate(self):
        if self.grid_density < 8:
            raise ScenarioError("grid.density must be at least 8")
        for name in ("newton_tol", "flow_rtol", "flow_atol", "mesh_edge"):
            if getattr(self, name) <= 0:
                raise ScenarioError(f"{name} must be positive")
        if not 0.0 < self.delta_factor < 1.0:
            raise ScenarioError("delta.factor must lie in (0, 1)")
        if self.eta < 0.0:
            raise ScenarioError("eta must be nonnegative")
        if self.flow_max_steps <= 0:
            raise ScenarioError("flow.max_steps must be positive")
        kind = self.surface.split(":", 1)[0]
        if kind not in ("sphere", "torus", "implicit", "box-sublevel"):
            raise ScenarioError(f"unknown surface {self.surface!r}")
        return self

    def resolved(self):
        """All defaults materialized, using the scenario-file key spelling."""
        d = asdict(self)
        return {_KEYMAP_OUT.get(k, k): d[k] for k in sorted(d)}


_KEYMAP = {
    "surface": ("surface", str),
    "function": ("function", str),
    "tilt": ("tilt", float),
    "eta": ("eta", float),
    "seed": ("seed", int),
    "grid.density": ("grid_density", int),
    "newton.tol": ("newton_tol", float),
    "flow.rtol": ("flow_rtol", float),
    "flow.atol": ("flow_atol", float),
    "flow.max_steps": ("flow_max_steps", int),
    "mesh.edge": ("mesh_edge", float),
    "delta.factor": ("delta_factor", float),
    "output.dir": ("output_dir", str),
}
_KEYMAP_OUT = {attr: key for key, (attr, _) in _KEYMAP.items()}


def parse_scenario_text(text) -> Scenario:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _KEYMAP:
            raise ScenarioError(f"line {lineno}: unknown key {key!r}")
        attr, cast = _KEYMAP[key]
        try:
            values[attr] = cast(val)
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return Scenario(**values).validate()


def parse_scenario(path) -> Scenario:
    with open(path) as fh:
        return parse_scenario_text(fh.read())
