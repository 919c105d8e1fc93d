"""Command-line driver.

Subcommands read a JSON config (schema below, unknown keys rejected) and
write CSV/JSON artifacts. Exit codes: 0 ok, 1 validation deviation,
2 config error, 3 non-convergence, 4 I/O error.
"""

import argparse
import csv
import json
import os
import sys

import jsonschema
import numpy as np

from . import precompute as pc
from . import solver as S
from .ewald import PeriodicBox, select_ewald_params
from .geometry import ParticlePlacement, SpheroidShape, build_grid, rotation_matrix
from .qbx import QbxParams, select_params

EXIT_OK, EXIT_DEVIATION, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_IO = 0, 1, 2, 3, 4

_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_vec3_list = {"type": "array", "items": _vec3}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["geometry", "mode"],
    "properties": {
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "required": ["shape", "n_theta"],
            "properties": {
                "shape": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["a", "c"],
                    "properties": {"a": {"type": "number", "exclusiveMinimum": 0},
                                   "c": {"type": "number", "exclusiveMinimum": 0}},
                },
                "n_theta": {"type": "integer", "minimum": 4},
                "n_phi": {"type": "integer", "minimum": 4},
            },
        },
        "particles": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["center"],
                "properties": {"center": _vec3, "axis": _vec3, "angle": {"type": "number"}},
            },
        },
        "lattice": {
            "type": "object",
            "additionalProperties": False,
            "required": ["chi"],
            "properties": {"chi": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
        },
        "box": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                "minItems": 3, "maxItems": 3},
        "mu": {"type": "number", "exclusiveMinimum": 0},
        "tolerance": {"type": "number", "minimum": 1e-12, "maximum": 1e-4},
        "qbx": {
            "type": "object",
            "additionalProperties": False,
            "required": ["r_over_h", "p", "kappa"],
            "properties": {"r_over_h": {"type": "number", "exclusiveMinimum": 0},
                           "p": {"type": "integer", "minimum": 1},
                           "kappa": {"type": "integer", "minimum": 1}},
        },
        "mode": {
            "oneOf": [
                {"type": "object", "additionalProperties": False, "required": ["type", "U", "Omega"],
                 "properties": {"type": {"const": "resistance"}, "U": _vec3_list, "Omega": _vec3_list}},
                {"type": "object", "additionalProperties": False, "required": ["type", "forces", "torques"],
                 "properties": {"type": {"const": "mobility"}, "forces": _vec3_list, "torques": _vec3_list}},
            ],
        },
        "background": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"u0": _vec3,
                           "gradient": {"type": "array", "items": _vec3, "minItems": 3, "maxItems": 3}},
        },
        "field": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "points": _vec3_list,
                "grid": {"type": "object", "additionalProperties": False, "required": ["lo", "hi", "n"],
                         "properties": {"lo": _vec3, "hi": _vec3,
                                        "n": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                              "minItems": 3, "maxItems": 3}}},
            },
        },
        "streamlines": {
            "type": "object",
            "additionalProperties": False,
            "required": ["seeds", "t_end"],
            "properties": {"seeds": _vec3_list,
                           "t_end": {"type": "number", "exclusiveMinimum": 0},
                           "rtol": {"type": "number", "exclusiveMinimum": 0},
                           "atol": {"type": "number", "exclusiveMinimum": 0},
                           "n_out": {"type": "integer", "minimum": 2}},
        },
        "output": {"type": "string"},
    },
}


class ConfigError(ValueError):
    pass


def _fmt(v):
    return f"{v:.9g}"


def validate_config(cfg):
    """Schema check plus cross-field rules; raises ConfigError with the field path."""
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {e.message}") from None
    if ("particles" in cfg) == ("lattice" in cfg):
        raise ConfigError("config error: give exactly one of 'particles' or 'lattice'")
    if "lattice" in cfg:
        shp = cfg["geometry"]["shape"]
        if shp["a"] != shp["c"]:
            raise ConfigError("config error at lattice: a lattice requires a sphere (a == c)")
        if "box" in cfg:
            raise ConfigError("config error at box: a lattice sets its own box")
    M = 1 if "lattice" in cfg else len(cfg["particles"])
    mode = cfg["mode"]
    for key in ("U", "Omega", "forces", "torques"):
        if key in mode and len(mode[key]) != M:
            raise ConfigError(f"config error at mode.{key}: expected {M} entries, got {len(mode[key])}")
    return cfg


def load_config(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config error: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    return validate_config(cfg)


# -- config -> objects ------------------------------------------------------------

def lattice_box(a, chi):
    """Cubic cell of a simple cubic sphere array: L = 2a / chi."""
    if not 0 < chi <= 1:
        raise ValueError("chi must lie in (0, 1]")
    L = 2 * a / chi
    return PeriodicBox(np.array([L, L, L]))


def background_flow(cfg):
    bg = cfg.get("background")
    if not bg:
        return None
    u0 = np.asarray(bg.get("u0", [0, 0, 0]), dtype=float)
    G = np.asarray(bg.get("gradient", np.zeros((3, 3))), dtype=float)
    return lambda x: u0 + np.atleast_2d(x) @ G.T


class Setup:
    """Grid, QBX/Ewald parameters and the system described by a config."""

    def __init__(self, cfg, cache=None):
        g = cfg["geometry"]
        shape = SpheroidShape(g["shape"]["a"], g["shape"]["c"])
        self.grid = build_grid(shape, g["n_theta"], g.get("n_phi"))
        self.tolerance = cfg.get("tolerance", 1e-8)
        if "qbx" in cfg:
            q = cfg["qbx"]
            self.params = QbxParams.from_ratio(self.grid, q["r_over_h"], q["p"], q["kappa"])
        else:
            self.params = select_params(self.grid, self.tolerance)
        if "lattice" in cfg:
            self.box = lattice_box(shape.a, cfg["lattice"]["chi"])
            self.placements = [ParticlePlacement(np.zeros(3))]
        else:
            self.box = PeriodicBox(np.asarray(cfg["box"], dtype=float)) if "box" in cfg else None
            self.placements = [ParticlePlacement(np.asarray(p["center"], dtype=float),
                                                 rotation_matrix(p.get("axis", [0, 0, 1]), p.get("angle", 0.0)))
                               for p in cfg["particles"]]
        self.ewald = select_ewald_params(self.box, self.grid.N, self.tolerance) if self.box is not None else None
        self.u_bg = background_flow(cfg)
        self.mu = cfg.get("mu", 1.0)
        self.mode_cfg = cfg["mode"]
        self.cache = cache
        self._maps = None

    @property
    def maps(self):
        if self._maps is None:
            self._maps = load_or_build_maps(self.grid, self.params, self.cache)
        return self._maps

    def system(self):
        m = self.mode_cfg
        if m["type"] == "resistance":
            mode = S.Resistance(np.asarray(m["U"], dtype=float), np.asarray(m["Omega"], dtype=float))
        else:
            mode = S.Mobility(np.asarray(m["forces"], dtype=float), np.asarray(m["torques"], dtype=float))
        return S.SystemState(self.grid, self.placements, self.params, mode, mu=self.mu,
                             box=self.box, ewald=self.ewald, u_bg=self.u_bg)

    def report(self):
        out = {"grid": {"n_theta": self.grid.n_theta, "n_phi": self.grid.n_phi, "h": self.grid.h},
               "qbx": {"r": self.params.r, "p": self.params.p, "kappa": self.params.kappa,
                       "d_eps": self.params.d_eps},
               "tolerance": self.tolerance}
        if self.ewald is not None:
            out["ewald"] = {"xi": self.ewald.xi, "r_c": self.ewald.r_c, "K": self.ewald.K,
                            "box": [float(v) for v in self.box.L]}
        return out


def load_or_build_maps(grid, params, cache=None):
    """Precomputed maps from ``cache`` if it matches, else built (and saved there)."""
    if cache and os.path.exists(cache):
        try:
            return pc.cache_load(cache, grid, params)
        except pc.CacheFingerprintError:
            pass
    maps = pc.build_blocks(grid, params, with_M=False)
    if cache:
        pc.cache_save(maps, cache)
    return maps


# -- artifact writers -------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in r])


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# -- subcommands -------------------------------------------------------------------

def cmd_solve(cfg, cache=None, out_dir=None):
    """Solve the configured system and write density, body and residual files."""
    st = Setup(cfg, cache)
    system = st.system()
    sol = S.solve(system, st.tolerance, st.maps)
    out_dir = out_dir or cfg.get("output", ".")
    os.makedirs(out_dir, exist_ok=True)
    N = st.grid.N
    q = sol.Q.reshape(system.M, 3, N)
    _write_csv(os.path.join(out_dir, "density.csv"), ["particle", "node", "qx", "qy", "qz"],
               ([a, n, *q[a, :, n]] for a in range(system.M) for n in range(N)))
    _write_csv(os.path.join(out_dir, "bodies.csv"),
               ["particle", "fx", "fy", "fz", "tx", "ty", "tz", "Ux", "Uy", "Uz", "Ox", "Oy", "Oz"],
               ([a, *sol.forces[a], *sol.torques[a], *sol.U[a], *sol.Omega[a]] for a in range(system.M)))
    _write_csv(os.path.join(out_dir, "residuals.csv"), ["iteration", "relative_residual"],
               enumerate(sol.residuals))
    rep = st.report()
    rep["iterations"] = sol.iterations
    if system.periodic:
        rep["cell_mean_velocity"] = [float(v) for v in S.cell_mean_velocity(system, sol.Q)]
    _write_json(os.path.join(out_dir, "parameters.json"), rep)
    return st, system, sol


# Wilson triangle reference values (U1, U2, U3, a Omega)
WILSON_TABLE = {
    2.10: (0.73857, 0.59718, 0.03517, 0.052035),
    2.50: (0.87765, 0.49545, 0.07393, 0.045466),
    3.00: (0.93905, 0.41694, 0.07824, 0.035022),
}


def wilson_placements(s, a=1.0):
    """Sphere 1 at the top of an equilateral triangle with sides s a, centroid at the origin."""
    if not s > 2:
        raise ValueError(f"spheres overlap or touch for s = {s} <= 2")
    d = s * a
    return [ParticlePlacement(np.array([0.0, d / np.sqrt(3), 0.0])),
            ParticlePlacement(np.array([d / 2, -d / (2 * np.sqrt(3)), 0.0])),
            ParticlePlacement(np.array([-d / 2, -d / (2 * np.sqrt(3)), 0.0]))]


def cmd_validate_wilson(s, n_theta=64, r_over_h=3.0, kappa=5, p=20, tol=1e-8, cache=None, mu=1.0):
    """Free-space mobility solve of the Wilson triangle; returns (U1, U2, U3, a Omega).

    A force 6 pi mu a pushes sphere 1 toward the centroid (-y). U2 and U3 are
    the velocity of sphere 2 along and across the force, Omega its spin.
    """
    a = 1.0
    grid = build_grid(SpheroidShape(a, a), n_theta)
    params = QbxParams.from_ratio(grid, r_over_h, p, kappa)
    maps = load_or_build_maps(grid, params, cache)
    F = np.zeros((3, 3))
    F[0, 1] = -6 * np.pi * mu * a
    system = S.SystemState(grid, wilson_placements(s, a), params, S.Mobility(F, np.zeros((3, 3))), mu=mu)
    sol = S.solve(system, tol, maps)
    U, W = sol.U, sol.Omega
    return np.array([-U[0, 1], -U[1, 1], abs(U[1, 0]), a * abs(W[1, 2])]), sol


# Simple cubic array drag reference values
LATTICE_TABLE = {0.3: 1.699884, 0.4: 2.151801, 0.5: 2.842022, 0.6: 3.973781, 0.7: 6.004034,
                 0.8: 10.054098, 0.9: 19.161078, 0.95: 27.918287, 1.0: 42.102343}


def dilute_lattice_drag(chi):
    """Point-force series for the simple cubic array, phi = (pi/6) chi^3."""
    phi = np.pi / 6 * chi**3
    c = phi ** (1 / 3)
    inv = 1 - 1.7601 * c + phi - 1.5593 * phi**2 + 3.9799 * phi ** (8 / 3) - 3.0734 * phi ** (10 / 3)
    return 1 / inv


def cmd_validate_lattice(chi, n_theta=30, tolerance=1e-7, cache=None, mu=1.0):
    """Drag coefficient K = F / (6 pi mu a U) of a simple cubic sphere array.

    U is the sphere velocity relative to the cell-mean velocity with the
    particle interior moving rigidly.
    """
    if not 0 < chi <= 1:
        raise ValueError("chi must lie in (0, 1]")
    a = 1.0
    grid = build_grid(SpheroidShape(a, a), n_theta)
    params = select_params(grid, tolerance)
    maps = load_or_build_maps(grid, params, cache)
    box = lattice_box(a, chi)
    ew = select_ewald_params(box, grid.N, tolerance)
    F = 6 * np.pi * mu * a
    system = S.SystemState(grid, [ParticlePlacement(np.zeros(3))], params,
                           S.Mobility(np.array([[F, 0, 0]]), np.zeros((1, 3))), mu=mu, box=box, ewald=ew)
    sol = S.solve(system, min(tolerance, 1e-8), maps)
    U = sol.U[0, 0] - S.cell_mean_velocity(system, sol.Q)[0]
    return F / (6 * np.pi * mu * a * U), sol


def field_targets(cfg):
    f = cfg.get("field")
    if not f or ("points" not in f and "grid" not in f):
        raise ConfigError("config error at field: give 'points' or 'grid'")
    pts = []
    if "points" in f:
        pts.append(np.asarray(f["points"], dtype=float).reshape(-1, 3))
    if "grid" in f:
        gr = f["grid"]
        axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(gr["lo"], gr["hi"], gr["n"])]
        P = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        pts.append(P)
    return np.concatenate(pts)


def _velocity_function(cfg, cache):
    """u(x) for a config: solves first when particles are present."""
    if "particles" in cfg and len(cfg["particles"]) == 0:
        ubg = background_flow(cfg)
        box = np.asarray(cfg["box"], dtype=float) if "box" in cfg else None

        def u0(x):
            x = np.atleast_2d(x)
            u = np.zeros_like(x) if ubg is None else np.asarray(ubg(x), dtype=float).reshape(-1, 3)
            return u, np.full(len(x), "periodic" if box is not None else "direct", dtype=object)
        return u0, (PeriodicBox(box) if box is not None else None)
    st = Setup(cfg, cache)
    system = st.system()
    sol = S.solve(system, st.tolerance, st.maps)
    op = S.BIEOperator(system, st.maps)
    return (lambda x: S.evaluate_field(system, sol, x, operator=op)), st.box


def cmd_field(cfg, cache=None, out_path=None):
    """Velocity at the configured targets; CSV x,y,z,ux,uy,uz,route."""
    x = field_targets(cfg)
    ufun, _ = _velocity_function(cfg, cache)
    u, route = ufun(x)
    out_path = out_path or os.path.join(cfg.get("output", "."), "field.csv")
    d = os.path.dirname(out_path)
    if d:
        os.makedirs(d, exist_ok=True)
    _write_csv(out_path, ["x", "y", "z", "ux", "uy", "uz", "route"],
               ([*x[i], *u[i], str(route[i])] for i in range(len(x))))
    return x, u, route


def trace_streamlines(ufun, seeds, t_end, rtol=1e-6, atol=1e-8, n_out=50, box=None):
    """Adaptive RK45 tracing of dx/dt = u(x); returns a list of (t, X) per seed.

    Points are integrated unwrapped and reported wrapped into the box.
    """
    from scipy.integrate import solve_ivp

    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    u0, route = ufun(seeds)
    if np.any(route == "inside"):
        raise ValueError(f"seeds inside a body: {np.nonzero(route == 'inside')[0].tolist()}")
    t_eval = np.linspace(0, t_end, n_out)
    lines = []
    for x0 in seeds:
        def rhs(t, x):
            u, r = ufun(x[None, :])
            if r[0] == "inside":
                raise ValueError(f"streamline entered a body at t = {t}")
            return u[0]
        res = solve_ivp(rhs, (0, t_end), x0, method="RK45", rtol=rtol, atol=atol, t_eval=t_eval)
        if not res.success:
            raise RuntimeError(f"streamline integration failed: {res.message}")
        X = res.y.T
        if box is not None:
            X = box.wrap(X)
        lines.append((res.t, X))
    return lines


def cmd_streamlines(cfg, cache=None, out_path=None):
    """Streamlines from the configured seeds; CSV seed,t,x,y,z."""
    sl = cfg.get("streamlines")
    if not sl:
        raise ConfigError("config error at streamlines: section required")
    ufun, box = _velocity_function(cfg, cache)
    lines = trace_streamlines(ufun, sl["seeds"], sl["t_end"], sl.get("rtol", 1e-6), sl.get("atol", 1e-8),
                              sl.get("n_out", 50), box)
    out_path = out_path or os.path.join(cfg.get("output", "."), "streamlines.csv")
    d = os.path.dirname(out_path)
    if d:
        os.makedirs(d, exist_ok=True)
    _write_csv(out_path, ["seed", "t", "x", "y", "z"],
               ([k, t[i], *X[i]] for k, (t, X) in enumerate(lines) for i in range(len(t))))
    return lines


def cmd_precompute(cfg, cache):
    """Build the precomputed maps for the configured grid and write them to ``cache``."""
    if not cache:
        raise ConfigError("precompute needs --cache <path>")
    st = Setup(cfg, None)
    maps = pc.build_blocks(st.grid, st.params, with_M=False)
    pc.cache_save(maps, cache)
    return maps


# -- entry point -------------------------------------------------------------------

def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="thread count for BLAS and compiled loops")
    common.add_argument("--cache", default=argparse.SUPPRESS, help="precomputed-map cache file")
    ap = argparse.ArgumentParser(prog="stokesqbx", description=__doc__.splitlines()[0], parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("solve", "field", "streamlines", "precompute"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--config", required=True)
        sp.add_argument("--output", default=None, help="output directory (solve) or file")
    w = sub.add_parser("validate-wilson", parents=[common])
    w.add_argument("s", help="side length in radii, e.g. 2.50 or s=2.50")
    w.add_argument("--grid", type=int, default=64)
    w.add_argument("--r-over-h", type=float, default=3.0)
    w.add_argument("--kappa", type=int, default=5)
    w.add_argument("--p", type=int, default=20)
    w.add_argument("--tol", type=float, default=None, help="acceptance tolerance per quantity")
    lat = sub.add_parser("validate-lattice", parents=[common])
    lat.add_argument("chi", help="chi in (0, 1], e.g. 0.5 or chi=0.5")
    lat.add_argument("--grid", type=int, default=30)
    lat.add_argument("--tolerance", type=float, default=1e-7)
    lat.add_argument("--tol", type=float, default=None, help="acceptance tolerance on K")
    return ap


def _number(arg, key):
    s = str(arg)
    if s.startswith(key + "="):
        s = s[len(key) + 1:]
    return float(s)


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    import numba

    threadpool_limits(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _run(args):
    args.threads = getattr(args, "threads", None)
    args.cache = getattr(args, "cache", None)
    _set_threads(args.threads)
    if args.command == "validate-wilson":
        s = _number(args.s, "s")
        vals, _ = cmd_validate_wilson(s, args.grid, args.r_over_h, args.kappa, args.p, cache=args.cache)
        print("s,U1,U2,U3,Omega")
        print(",".join(_fmt(v) for v in (s, *vals)))
        ref = WILSON_TABLE.get(round(s, 2))
        if ref is None:
            return EXIT_OK
        tol = args.tol if args.tol is not None else (5e-6 if args.grid >= 64 else 5e-4)
        dev = np.abs(vals - np.array(ref))
        print("reference," + ",".join(_fmt(v) for v in ref))
        print("deviation," + ",".join(_fmt(v) for v in dev))
        return EXIT_OK if np.all(dev <= tol) else EXIT_DEVIATION
    if args.command == "validate-lattice":
        chi = _number(args.chi, "chi")
        K, _ = cmd_validate_lattice(chi, args.grid, args.tolerance, cache=args.cache)
        print("chi,K")
        print(f"{_fmt(chi)},{_fmt(K)}")
        ref = LATTICE_TABLE.get(round(chi, 2))
        if ref is None and chi <= 0.3:
            ref = dilute_lattice_drag(chi)
        if ref is None:
            return EXIT_OK
        tol = args.tol if args.tol is not None else (1e-4 if chi <= 0.5 else 5e-4)
        print(f"reference,{_fmt(ref)}")
        print(f"deviation,{_fmt(abs(K - ref))}")
        return EXIT_OK if abs(K - ref) <= tol else EXIT_DEVIATION
    cfg = load_config(args.config)
    if args.command == "solve":
        _, _, sol = cmd_solve(cfg, args.cache, args.output)
        print(f"converged in {sol.iterations} iterations")
    elif args.command == "field":
        cmd_field(cfg, args.cache, args.output)
    elif args.command == "streamlines":
        cmd_streamlines(cfg, args.cache, args.output)
    elif args.command == "precompute":
        cmd_precompute(cfg, args.cache)
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except S.ConvergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (OSError, pc.CacheError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
