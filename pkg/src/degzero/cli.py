"""Command line driver.

Subcommands: analyze, escape, quantize, spectrum, weyl, evolve, resolvent,
wavefront, viscous, run.  Exit codes: 0 success, 2 precondition error,
3 numerical failure, 4 configuration error.  Every invocation writes a
``manifest.json`` listing the produced files with SHA-256 hashes; a failing
stage adds a machine-readable error record and keeps earlier files.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .io import Manifest, dump_json, to_jsonable, write_csv
from .symbol import SymbolSpec, default_model, default_model_3d, unperturbed_model

__all__ = ["main", "Pipeline", "EXIT_OK", "EXIT_PRECONDITION", "EXIT_NUMERICAL", "EXIT_CONFIG"]

EXIT_OK, EXIT_PRECONDITION, EXIT_NUMERICAL, EXIT_CONFIG = 0, 2, 3, 4


def load_symbol(cfg: RunConfig) -> SymbolSpec:
    s = cfg["symbol"]
    if s["family"] == "default":
        return default_model(s["alpha"], s["beta"])
    if s["family"] == "unperturbed":
        return unperturbed_model()
    if not s["path"]:
        raise ConfigError("[symbol] family = json needs a path")
    return SymbolSpec.from_json(Path(s["path"]).read_text(), name=Path(s["path"]).stem)


class Pipeline:
    """Stage runner sharing intermediate objects (atlas, structure, matrices)."""

    def __init__(self, cfg: RunConfig, out, manifest: Manifest):
        self.cfg = cfg
        self.out = Path(out)
        self.manifest = manifest
        self.fmt = cfg["run"]["format"]
        self.seed = cfg["run"]["seed"]
        self.spec = load_symbol(cfg)
        self.omega = cfg["symbol"]["omega"]
        self._cache: dict = {}

    # -------------------------------------------------------------- output
    def _json(self, name, obj, stage):
        p = self.out / f"{name}.json"
        dump_json({"seed": self.seed, "stage": stage, **obj}, p)
        self.manifest.add(p, stage)
        return p

    def _table(self, name, header, rows, stage, meta=None):
        meta = {"seed": self.seed, "stage": stage, **(meta or {})}
        rows = [list(r) for r in rows]
        if self.fmt == "csv":
            p = self.out / f"{name}.csv"
            write_csv(p, header, rows, [f"{k}={v}" for k, v in sorted(meta.items())])
        else:
            p = self.out / f"{name}.json"
            dump_json({**meta, "columns": header, "rows": rows}, p)
        self.manifest.add(p, stage)
        return p

    def rng(self, stream: int):
        from .waves import make_rng
        return make_rng(self.seed * 1000 + stream)

    # ------------------------------------------------------------- stages
    def atlas(self):
        if "atlas" not in self._cache:
            from .foliation import FoliationAtlas
            self._cache["atlas"] = FoliationAtlas.from_symbol(self.spec, grid=self.cfg["foliation"]["grid"],
                                                               omega=self.omega)
        return self._cache["atlas"]

    def structure(self, with_basin: bool = False):
        key = "structure_basin" if with_basin else "structure"
        if key not in self._cache:
            from .foliation import assemble_simple_structure, find_cycles, find_singular_points
            at = self.atlas()
            pts, pn = find_singular_points(at)
            cyc, cn = find_cycles(at)
            fc = self.cfg["foliation"]
            S = assemble_simple_structure(at, pts, cyc, rng=self.rng(1) if with_basin else None,
                                          n_seeds=fc["n_seeds"] if with_basin else 0,
                                          s_max=fc["s_max"], capture=fc["capture"])
            S.notes = list(at.notes) + list(pn) + list(cn)
            self._cache[key] = S
            self._cache.setdefault("structure", S)
        return self._cache[key]

    def analyze(self):
        at = self.atlas()
        S = self.structure(with_basin=True)
        doc = {"symbol": self.spec.name, "omega": self.omega, "grid": at.grid,
               "n_branches": len(at.branches), "polar_identity_residual": at.polar_residual(),
               "singular_points": [p.to_dict() for p in S.points],
               "cycles": [c.to_dict() for c in S.cycles], "basin": S.basin,
               "structure": S.to_dict(), "notes": S.notes}
        self._json("analyze", doc, "analyze")
        rows = [[c.branch, c.period, c.multiplier, c.stability, c.winding[0], c.winding[1]] for c in S.cycles]
        self._table("cycles", ["branch", "period", "multiplier", "stability", "w1", "w2"], rows, "analyze")
        return doc

    def escape(self):
        from .escape import (NoEscapeFound, blend_derivative_check, certify, construct_flow_method,
                             radial_source_check, synthesize_lp)
        ec = self.cfg["escape"]
        at = self.atlas()
        doc = {}
        k_lp = None
        if ec["method"] in ("lp", "both"):
            try:
                k_lp = synthesize_lp(at, basis_size=ec["basis_size"], min_margin=ec["min_margin"])
            except NoEscapeFound as exc:
                doc["lp"] = {"feasible": False, "best_margin": exc.best_delta}
                self._json("escape", doc, "escape")
                raise
            delta = k_lp.delta
            margin = certify(k_lp, at, refinement=ec["refinement"])
            doc["lp"] = {"feasible": True, "delta": delta, "certified_margin": margin,
                         "certified_grid": k_lp.cert_grid, "meta": k_lp.meta}
            p = self.out / "escape_lp_function.json"
            from .io import atomic_write_text
            atomic_write_text(p, k_lp.to_json())
            self.manifest.add(p, "escape")
        if ec["method"] in ("flow", "both"):
            S = self.structure()
            kf, FS = construct_flow_method(at, S, refinement=ec["refinement"])
            doc["flow"] = {"delta": kf.delta, "meta": kf.meta, "stats": FS.stats,
                           "blend_check": blend_derivative_check(kf)}
            from .io import atomic_write_text
            p = self.out / "escape_flow_function.json"
            atomic_write_text(p, kf.to_json())
            self.manifest.add(p, "escape")
        k = k_lp if k_lp is not None else kf
        rep = radial_source_check(k, at, self.structure(), n_seeds=ec["n_radial_seeds"])
        doc["radial_source"] = rep
        self._json("escape", doc, "escape")
        return {"delta": {m: doc[m]["delta"] for m in ("lp", "flow") if m in doc}, **doc}

    def _matrix(self, N):
        key = ("M", N)
        if key not in self._cache:
            from .quantize import quantize
            self._cache[key] = quantize(self.spec, N, self.cfg["quantize"]["r0"])
        return self._cache[key]

    def quantize(self):
        qc = self.cfg["quantize"]
        M = self._matrix(qc["N"])
        p = self.out / f"operator_N{qc['N']}.npz"
        M.save_npz(p)
        self.manifest.add(p, "quantize")
        if self.fmt == "csv":
            p = self.out / f"operator_N{qc['N']}.csv"
            M.save_csv(p)
            self.manifest.add(p, "quantize")
        doc = {**M.metadata(), "hermitian_defect": M.hermitian_defect(), "bandwidth": M.bandwidth(),
               "nnz": int(M.matrix.nnz)}
        self._json("quantize", doc, "quantize")
        return doc

    def spectrum(self):
        from .spectral import eigendecompose, eigenvalues, essential_spectrum_estimate
        sc = self.cfg["spectrum"]
        N = self.cfg["quantize"]["N"]
        M = self._matrix(N)
        w = eigenvalues(M)
        self._table(f"eigenvalues_N{N}", ["index", "eigenvalue"], enumerate(w.tolist()), "spectrum",
                    {"N": N})
        doc = {"N": N, "lambda_min": w[0], "lambda_max": w[-1],
               "essential": essential_spectrum_estimate(self.spec, sc["N_list"], self.cfg["quantize"]["r0"],
                                                        sc["margin"])}
        if M.dim <= 5000:
            wd, V = eigendecompose(M, sc["residual_tol"])
            doc["dense_check_max_diff"] = float(np.max(np.abs(wd - w)))
        self._json("spectrum", doc, "spectrum")
        return doc

    def weyl(self):
        from .spectral import phase_volume, weyl_count
        wc = self.cfg["weyl"]
        spec3 = default_model_3d(wc["alpha"])
        J = tuple(wc["J"])
        vol = phase_volume(spec3.h1, J)
        rows = []
        for n in wc["n_list"]:
            r = weyl_count(spec3, n, J, kappa=wc["kappa"], volume=vol["volume"])
            rows.append([n, r.count, r.prediction, r.rel_error])
        self._table("weyl", ["n", "count", "prediction", "rel_error"], rows, "weyl",
                    {"J": list(J), "volume": vol["volume"], "alpha": wc["alpha"]})
        doc = {"J": J, "volume": vol, "rows": rows, "I0_Iinf": spec3.ranges()}
        self._json("weyl", doc, "weyl")
        return doc

    def _forcing(self, M, stream, n_members=None):
        from .waves import broadband_forcing, exact_modes_at, project_out
        wc = self.cfg["waves"]
        f = broadband_forcing(M.modes, self.rng(stream), s_dec=wc["s_dec"], k_min=wc["k_min"],
                              n_members=n_members or wc["n_members"], omega=self.omega)
        _, Vk = exact_modes_at(M, self.omega)
        f.f = project_out(f.f, Vk)
        f.meta["projected_exact_modes"] = int(Vk.shape[1])
        return f

    def evolve(self):
        from .waves import edge_time, evolve_forced, growth_slope, heisenberg_time
        wc = self.cfg["waves"]
        M = self._matrix(wc["N"])
        TH, dl = heisenberg_time(M, self.omega, wc["gamma"])
        f = self._forcing(M, 2)
        # the fit ends at the Heisenberg guard or when energy reaches the truncation edge
        probe = evolve_forced(M, f, np.linspace(0.0, TH, wc["n_times"]), method="chebyshev",
                              edge_ratio=wc["edge_ratio"])
        T2 = edge_time(probe, wc["edge_frac"])
        times = np.linspace(0.0, T2, wc["n_times"])
        res = evolve_forced(M, f, times, method="chebyshev", s_list=wc["s_list"], edge_ratio=wc["edge_ratio"])
        try:
            c, r2 = growth_slope(res, (0.25 * T2, T2), t_guard=TH, r2_min=wc["r2_min"])
            diag = None
        except Exception as exc:  # fitted values are kept on res for the record
            c, r2, diag = res.slope, res.r2, str(exc)
        header, rows = res.rows()
        self._table(f"evolve_N{wc['N']}", header, rows, "evolve", {"omega": self.omega, "N": wc["N"]})
        doc = {"N": wc["N"], "omega": self.omega, "heisenberg_time": TH, "edge_time": T2, "local_spacing": dl,
               "window": res.window, "slope": c, "r2": r2, "diagnostic": diag,
               "n_members": wc["n_members"], "chebyshev_degree": res.meta.get("degree")}
        self._json("evolve", doc, "evolve")
        if diag is not None:
            from .waves import NoLinearRegime
            raise NoLinearRegime(diag)
        return doc

    def resolvent(self):
        from .waves import sobolev_scaling
        wc = self.cfg["waves"]
        M = self._matrix(wc["N"])
        f = self._forcing(M, 3)
        r = sobolev_scaling(M, f.f, self.omega, wc["eps_list"], wc["s_list"], guard=wc["eps_guard"],
                            method="splu")
        rows = [[e] + [r["norms"][s][i] for s in sorted(r["norms"])] for i, e in enumerate(r["eps"])]
        self._table(f"resolvent_N{wc['N']}", ["eps"] + [f"H^{s:g}" for s in sorted(r["norms"])], rows,
                    "resolvent")
        doc = {"N": wc["N"], "spacing": r["spacing"], "exponents": r["exponents"]}
        self._json("resolvent", doc, "resolvent")
        return doc

    def wavefront(self):
        from .waves import concentration_score, resolvent_apply, wavefront_energy
        wc = self.cfg["waves"]
        S = self.structure()
        Gp, Gm = S.direction_set("+"), S.direction_set("-")
        M = self._matrix(wc["N"])
        f = self._forcing(M, 4, n_members=1)
        u = resolvent_apply(M, self.omega, wc["wavefront_eps"], f.f, method="splu")
        wf = wavefront_energy(u, M.modes, M.N, wc["lam_w"], wc["n_phi"])
        doc = {"N": wc["N"], "eps": wc["wavefront_eps"], "lam_w": wc["lam_w"], "d_gamma": wc["d_gamma"],
               "score_plus": concentration_score(wf, Gp, wc["d_gamma"]),
               "score_minus": concentration_score(wf, Gm, wc["d_gamma"]),
               "q": wf["q"], "phi": wf["phi"],
               "energy_q_by_angle": wf["energy"].sum(axis=1)}
        self._json("wavefront", doc, "wavefront")
        return doc

    def viscous(self):
        from .waves import ForcingSpec, evolve_viscous, resolvent_apply, sobolev_norm
        wc = self.cfg["waves"]
        M = self._matrix(wc["N"])
        f0 = self._forcing(M, 5, n_members=1)
        times = np.linspace(0.0, wc["viscous_t_max"], wc["n_times"])
        u_inv = resolvent_apply(M, self.omega, min(wc["eps_list"]), f0.f, method="splu")
        rows = []
        for sig in wc["sigma_list"]:
            fs = ForcingSpec(f0.f, self.omega, sig, f0.s_dec, M.modes)
            res = evolve_viscous(M, fs, times)
            v = res.meta["steady_state"]
            # the steady profile of u' + iMu - sigma Lap u = f e^{-i omega t} is -i times u_eps
            dist = sobolev_norm(v - (-1j) * u_inv, -1.0, M.modes)
            rows.append([sig, res.norm2[-1], res.meta["steady_norm2"], dist])
            h, r = res.rows()
            self._table(f"viscous_sigma{sig:g}", h, r, "viscous", {"sigma": sig})
        self._table("viscous_sweep", ["sigma", "final_norm2", "steady_norm2", "Hm1_dist_to_inviscid"], rows,
                    "viscous")
        doc = {"rows": rows, "note": "exploratory; no pass/fail"}
        self._json("viscous", doc, "viscous")
        return doc

    STAGES = ("analyze", "escape", "quantize", "spectrum", "weyl", "evolve", "resolvent", "wavefront",
              "viscous")

    def run_stage(self, name):
        return getattr(self, name)()


def _exit_code(exc) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, ValueError):
        return EXIT_PRECONDITION
    return EXIT_NUMERICAL


def _parser():
    ap = argparse.ArgumentParser(prog="degzero", description="Degree-0 operator analysis pipeline.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in Pipeline.STAGES + ("run",):
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI or JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--format", choices=("csv", "json"))
        p.add_argument("--N", type=int, help="truncation for quantize/spectrum/waves stages")
        if name == "weyl":
            p.add_argument("--n", help="comma separated n values")
            p.add_argument("--J", help="interval a,b")
        if name == "escape":
            p.add_argument("--method", choices=("lp", "flow", "both"))
    return ap


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key, section, val in (("seed", "run", args.seed), ("out", "run", args.out),
                              ("format", "run", args.format)):
        if val is not None:
            cfg = cfg.override(section, key, val)
    if args.N is not None:
        sec = "waves" if args.command in ("evolve", "resolvent", "wavefront", "viscous") else "quantize"
        cfg = cfg.override(sec, "N", args.N)
    if getattr(args, "n", None):
        cfg = cfg.override("weyl", "n_list", args.n)
    if getattr(args, "J", None):
        cfg = cfg.override("weyl", "J", args.J)
    if getattr(args, "method", None):
        cfg = cfg.override("escape", "method", args.method)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    text = cfg.to_ini()
    man = Manifest(out, cfg["run"]["seed"], text)
    stages = cfg["run"]["stages"] if args.command == "run" else [args.command]
    code = EXIT_OK
    try:
        unknown = [s for s in stages if s not in Pipeline.STAGES]
        if unknown:
            raise ConfigError(f"unknown stage(s) {unknown}")
        pipe = Pipeline(cfg, out, man)
        from .io import atomic_write_text
        atomic_write_text(out / "config.ini", text)
        man.add(out / "config.ini", "config")
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        man.error("config", type(exc).__name__, str(exc))
        man.write()
        return EXIT_CONFIG
    for st in stages:
        n_before = len(man.entries)
        try:
            summary = pipe.run_stage(st)
            print(f"[{st}] ok: " + _short(summary))
        except Exception as exc:  # every failure becomes an error record and an exit code
            code = _exit_code(exc)
            for e in man.entries[n_before:]:
                e["partial"] = True
            man.error(st, type(exc).__name__, str(exc))
            print(f"[{st}] failed ({type(exc).__name__}): {exc}", file=sys.stderr)
            break
    man.write()
    return code


def _short(summary) -> str:
    keys = ("delta", "slope", "r2", "exponents", "score_plus", "rows", "lambda_min", "lambda_max",
            "polar_identity_residual", "basin", "dim")
    d = to_jsonable({k: summary[k] for k in keys if isinstance(summary, dict) and k in summary})
    s = str(d)
    return s if len(s) < 400 else s[:400] + "..."


if __name__ == "__main__":
    sys.exit(main())
