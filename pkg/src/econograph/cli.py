"""Command-line pipeline: synth -> fit -> debias -> eval.

Configuration is an INI file with one section per command (``[synth]``,
``[formation]``, ``[fit]``, ``[debias]``, ``[eval]``) plus ``[run]`` for the
master seed. Seed precedence: ``--seed``, then ``ECONOGRAPH_SEED``, then
``[run] seed``. Every command writes into a fresh directory together with a
``manifest.json`` holding the fully resolved configuration.

Exit codes: 1 invalid input, 2 numerical failure, 3 I/O failure. The
message goes to stderr and ``error.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CapabilityError, NumericalError, ValidationError
from .estimation import LOGDET_DENSE_LIMIT, FitConfig, ModelParams, fit
from .evaluation import baseline_lnp, baseline_logistic, combined_network, idm
from .graph import derive_networks
from .io import (
    load_graph,
    read_key_values,
    read_scores,
    save_graph,
    save_scores,
    write_csv_rows,
    write_ground_truth,
    write_key_values,
)
from .netform import PARAM_NAMES, FormationParams, JointConfig, fit_joint
from .synth import SynthConfig, generate

__all__ = ["main", "build_parser", "resolve_config", "DEFAULTS"]

log = logging.getLogger("econograph")

FORMAT_VERSIONS = {
    "graph": 1,
    "scores": 1,
    "ground_truth": 1,
    "formation_posterior": 1,
    "eval_report": 1,
    "manifest": 1,
}

DEFAULTS = {
    "run": {"seed": "0"},
    "synth": {
        "n": "100", "m": "", "q": "4", "p": "20", "label_noise": "0.08",
        "lambda1": "0.2", "lambda2": "0.1", "signal": "1.5",
        "membership_probs": "0.7,0.2,0.1", "mean_degree": "4.0", "formation_sweeps": "10",
        "formation_score": "fundamentals",
    },
    "formation": {
        "enabled": "false", "eta_pop": "0", "eta_tri": "0", "eta_sim": "0", "rho": "0", "w": "0",
    },
    "fit": {
        "method": "laplace", "sigma_eps": "1.0", "max_iter": "500", "grad_tol": "1e-6",
        "gain_tol": "1e-10", "seed": "", "fix_lambda2": "false", "fix_xi": "false",
        "fix_a": "true", "xi_concentration": "2.0",
    },
    "debias": {
        "chains": "3", "iters": "50000", "burn_frac": "0.2", "thin": "10",
        "aux_steps_factor": "50", "prior_sd": "10", "sigma_eps_vec": "", "method": "exchange",
        "freeze": "", "refit": "true",
    },
    "eval": {"lnp_mix": "0.9", "lnp_weight": "0.5", "replicate": "0"},
}

EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 1, 2, 3


class _Fail(Exception):
    def __init__(self, code, exc):
        super().__init__(str(exc))
        self.code = code
        self.exc = exc


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {v!r}", invariant="config boolean")


def _num(kind, section, key, v):
    try:
        return kind(v)
    except ValueError:
        raise ValidationError(f"[{section}] {key} = {v!r} is not a valid {kind.__name__}",
                              invariant="config value") from None


def resolve_config(path=None, seed=None, env=None):
    """Merge defaults, the INI file and seed overrides into plain dicts."""
    env = os.environ if env is None else env
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        extra = configparser.ConfigParser(interpolation=None)
        extra.read(p, encoding="utf-8")
        for section in extra.sections():
            if section not in DEFAULTS:
                raise ValidationError(f"unknown config section [{section}]", invariant="config section")
            for key, val in extra.items(section):
                if key not in DEFAULTS[section]:
                    raise ValidationError(f"unknown key {key!r} in [{section}]", invariant="config key")
                cp.set(section, key, val)
    resolved = {s: dict(cp.items(s)) for s in DEFAULTS}
    source = "config"
    if env.get("ECONOGRAPH_SEED", "").strip():
        resolved["run"]["seed"] = env["ECONOGRAPH_SEED"].strip()
        source = "environment"
    if seed is not None:
        resolved["run"]["seed"] = str(seed)
        source = "flag"
    _num(int, "run", "seed", resolved["run"]["seed"])
    resolved["run"]["seed_source"] = source
    return resolved


def _sub_seed(master, stream):
    return int(np.random.SeedSequence([int(master), stream]).generate_state(1)[0])


def _synth_config(cfg, master):
    s = cfg["synth"]
    probs = tuple(_num(float, "synth", "membership_probs", t) for t in s["membership_probs"].split(","))
    formation = None
    fm = cfg["formation"]
    if _bool(fm["enabled"]):
        formation = FormationParams(
            eta=[_num(float, "formation", k, fm[k]) for k in ("eta_pop", "eta_tri", "eta_sim")],
            rho=_num(float, "formation", "rho", fm["rho"]), w=_num(float, "formation", "w", fm["w"]),
        )
    return SynthConfig(
        n=_num(int, "synth", "n", s["n"]),
        m=_num(int, "synth", "m", s["m"]) if s["m"].strip() else None,
        q=_num(int, "synth", "q", s["q"]), p=_num(int, "synth", "p", s["p"]),
        label_noise=_num(float, "synth", "label_noise", s["label_noise"]),
        lambda1=_num(float, "synth", "lambda1", s["lambda1"]),
        lambda2=_num(float, "synth", "lambda2", s["lambda2"]),
        signal=_num(float, "synth", "signal", s["signal"]),
        membership_probs=probs, mean_degree=_num(float, "synth", "mean_degree", s["mean_degree"]),
        formation_sweeps=_num(float, "synth", "formation_sweeps", s["formation_sweeps"]),
        formation_score=s["formation_score"].strip(),
        true_formation=formation, seed=_sub_seed(master, 0),
    )


def _fit_config(cfg, master):
    f = cfg["fit"]
    return FitConfig(
        method=f["method"], sigma_eps=_num(float, "fit", "sigma_eps", f["sigma_eps"]),
        max_iter=_num(int, "fit", "max_iter", f["max_iter"]),
        grad_tol=_num(float, "fit", "grad_tol", f["grad_tol"]),
        gain_tol=_num(float, "fit", "gain_tol", f["gain_tol"]),
        seed=_num(int, "fit", "seed", f["seed"]) if f["seed"].strip() else _sub_seed(master, 1),
        fix_lambda2=_bool(f["fix_lambda2"]), fix_xi=_bool(f["fix_xi"]), fix_a=_bool(f["fix_a"]),
        xi_concentration=_num(float, "fit", "xi_concentration", f["xi_concentration"]),
    )


def _joint_config(cfg, master, parallel):
    d = cfg["debias"]
    freeze = tuple(t.strip() for t in d["freeze"].split(",") if t.strip())
    return JointConfig(
        chains=_num(int, "debias", "chains", d["chains"]), iters=_num(int, "debias", "iters", d["iters"]),
        burn_frac=_num(float, "debias", "burn_frac", d["burn_frac"]),
        thin=_num(int, "debias", "thin", d["thin"]),
        aux_steps_factor=_num(float, "debias", "aux_steps_factor", d["aux_steps_factor"]),
        prior_sd=_num(float, "debias", "prior_sd", d["prior_sd"]),
        sigma_eps_vec=_num(float, "debias", "sigma_eps_vec", d["sigma_eps_vec"]) if d["sigma_eps_vec"].strip() else None,
        method=d["method"], freeze=freeze, seed=_sub_seed(master, 2), parallel=parallel,
    )


def _fresh_dir(path):
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise FileExistsError(f"output directory {out} exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out, command, cfg, started, deterministic, outputs, extra=None):
    data = {
        "command": command,
        "package_version": __version__,
        "seed": int(cfg["run"]["seed"]),
        "seed_source": cfg["run"]["seed_source"],
        "deterministic": deterministic,
        "config": {k: v for k, v in cfg.items() if k != "run"},
        "format_versions": FORMAT_VERSIONS,
        "outputs": sorted(outputs),
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        data.update(extra)
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_synth(cfg, out):
    master = int(cfg["run"]["seed"])
    scfg = _synth_config(cfg, master)
    graph, truth = generate(scfg)
    save_graph(graph, out / "graph")
    write_ground_truth(out / "ground_truth.csv", truth.z_star, truth.epsilon)
    tp = truth.params.as_dict()
    if truth.formation is not None:
        tp.update({f"formation_{k}": v for k, v in truth.formation.as_dict().items()})
    write_key_values(out / "true_params.txt", tp)
    return graph, truth, ["graph/", "ground_truth.csv", "true_params.txt"]


def stage_fit(cfg, graph, out):
    fcfg = _fit_config(cfg, int(cfg["run"]["seed"]))
    result = fit(graph, fcfg)
    save_scores(out / "scores.csv", result.z_star)
    params = result.params.as_dict()
    params.update({"log_posterior": result.log_posterior, "converged": str(result.converged).lower(),
                   "iterations": result.iterations})
    write_key_values(out / "fit_params.txt", params)
    write_csv_rows(out / "fit_trace.csv", ["iteration", "objective"], list(enumerate(result.trace)))
    if not result.converged:
        log.warning("fit did not converge within %d iterations", fcfg.max_iter)
    return result, ["scores.csv", "fit_params.txt", "fit_trace.csv"]


def stage_debias(cfg, graph, fit_params, z_star, out, parallel):
    jcfg = _joint_config(cfg, int(cfg["run"]["seed"]), parallel)
    derived = derive_networks(graph, fit_params.xi)
    if jcfg.sigma_eps_vec is None:
        jcfg = JointConfig(**{f.name: getattr(jcfg, f.name) for f in fields(JointConfig)
                              if f.name != "sigma_eps_vec"}, sigma_eps_vec=fit_params.sigma_eps)
    res = fit_joint(graph, derived, z_star, jcfg)
    save_scores(out / "scores.csv", res.z_star, res.z_robust)
    write_csv_rows(out / "formation_posterior.csv", ["parameter", "mean", "sd", "rhat"], res.summary_rows())
    outputs = ["scores.csv", "formation_posterior.csv"]
    if _bool(cfg["debias"]["refit"]) and graph.labels is not None:
        if graph.n <= LOGDET_DENSE_LIMIT:
            # selection-aware refit at the posterior-mean formation parameters
            refit = fit(graph, _fit_config(cfg, int(cfg["run"]["seed"])), derived=derived,
                        init=(fit_params, np.zeros(graph.n)), formation=res.formation)
            kv = refit.params.as_dict()
            kv.update({"converged": str(refit.converged).lower(), "iterations": refit.iterations})
            write_key_values(out / "refit_params.txt", kv)
            outputs.append("refit_params.txt")
        else:
            log.warning("selection-aware refit skipped: n > %d", LOGDET_DENSE_LIMIT)
    diag = {
        "accept_theta": [float(v) for v in res.chains.accept_theta],
        "accept_score": [float(v) for v in res.chains.accept_score],
        "converged": res.chains.converged,
        "warnings": res.chains.warnings,
    }
    return res, outputs, diag


def stage_eval(cfg, graph, z_true, scores, out):
    e = cfg["eval"]
    replicate = e["replicate"]
    rows = []
    for name, z in scores:
        rows.append((name, replicate, idm(z, z_true).idm))
    if graph.labels is not None:
        bl, _ = baseline_logistic(graph.attributes, graph.labels)
        rows.append(("baseline_logistic", replicate, idm(bl, z_true).idm))
        d = derive_networks(graph)
        W = combined_network(d.association, d.social, _num(float, "eval", "lnp_weight", e["lnp_weight"]))
        lnp = baseline_lnp(W, graph.labels, mix=_num(float, "eval", "lnp_mix", e["lnp_mix"]))
        rows.append(("baseline_lnp", replicate, idm(lnp, z_true).idm))
    write_csv_rows(out / "eval_report.csv", ["method", "seed", "idm"], rows)
    return rows, ["eval_report.csv"]


def _read_truth(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1].copy()


def _read_fit_params(path):
    kv = read_key_values(path)
    keep = {k: v for k, v in kv.items() if k.startswith(("beta_", "xi_")) or k in
            ("lambda1", "lambda2", "alpha", "a", "b", "sigma_eps")}
    return ModelParams.from_dict(keep)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg, out):
    _, _, outputs = stage_synth(cfg, out)
    return outputs, {}


def cmd_fit(args, cfg, out):
    graph = load_graph(_need(args.input, "--input"))
    _, outputs = stage_fit(cfg, graph, out)
    return outputs, {"input": str(args.input)}


def cmd_debias(args, cfg, out):
    graph = load_graph(_need(args.input, "--input"))
    fit_dir = Path(_need(args.fit, "--fit"))
    params = _read_fit_params(fit_dir / "fit_params.txt")
    z_star, _ = read_scores(fit_dir / "scores.csv")
    _, outputs, diag = stage_debias(cfg, graph, params, z_star, out, args.parallel)
    return outputs, {"input": str(args.input), "fit": str(fit_dir), "chains": diag}


def cmd_eval(args, cfg, out):
    graph = load_graph(_need(args.input, "--input"))
    z_true = _read_truth(_need(args.truth, "--truth"))
    z_star, z_robust = read_scores(_need(args.scores, "--scores"))
    scores = [("model", z_star)]
    if np.all(np.isfinite(z_robust)):
        scores.append(("model_robust", z_robust))
    _, outputs = stage_eval(cfg, graph, z_true, scores, out)
    return outputs, {"input": str(args.input), "truth": str(args.truth), "scores": str(args.scores)}


def cmd_pipeline(args, cfg, out):
    graph, truth, outputs = stage_synth(cfg, out)
    fit_res, o2 = stage_fit(cfg, graph, out)
    res, o3, diag = stage_debias(cfg, graph, fit_res.params, fit_res.z_star, out, args.parallel)
    _, o4 = stage_eval(cfg, graph, truth.z_star, [("model", fit_res.z_star), ("model_robust", res.z_robust)], out)
    return sorted(set(outputs + o2 + o3 + o4)), {"chains": diag}


COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "debias": cmd_debias,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def _need(value, flag):
    if value is None:
        raise ValidationError(f"{flag} is required for this command", invariant="cli arguments")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="econograph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp_ = sub.add_parser(name)
        sp_.add_argument("--config", help="INI configuration file")
        sp_.add_argument("--out", help="fresh output directory")
        sp_.add_argument("--seed", type=int, help="master seed (overrides ECONOGRAPH_SEED)")
        mode = sp_.add_mutually_exclusive_group()
        mode.add_argument("--deterministic", dest="parallel", action="store_false",
                          help="sequential, bit-reproducible execution (default)")
        mode.add_argument("--parallel", dest="parallel", action="store_true",
                          help="run independent chains concurrently")
        sp_.set_defaults(parallel=False)
        sp_.add_argument("-v", "--verbose", action="store_true")
        if name in ("fit", "debias", "eval"):
            sp_.add_argument("--input", help="graph directory")
        if name == "debias":
            sp_.add_argument("--fit", help="output directory of a previous fit")
        if name == "eval":
            sp_.add_argument("--truth", help="ground_truth.csv")
            sp_.add_argument("--scores", help="scores.csv")
    return parser


def _classify(exc):
    if isinstance(exc, (ValidationError, CapabilityError)):
        return EXIT_VALIDATION
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, OSError):
        return EXIT_IO
    return None


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    out = None
    try:
        cfg = resolve_config(args.config, args.seed)
        out = _fresh_dir(args.out or f"run-{args.command}-{time.strftime('%Y%m%d-%H%M%S')}")
        outputs, extra = COMMANDS[args.command](args, cfg, out)
        _manifest(out, args.command, cfg, started, not args.parallel, outputs, extra)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _classify(exc)
        if code is None:
            raise
        msg = f"econograph {args.command}: {type(exc).__name__}: {exc}"
        print(msg, file=sys.stderr)
        if out is not None:
            payload = {
                "error": type(exc).__name__, "message": str(exc), "exit_code": code,
                "invariant": getattr(exc, "invariant", None),
            }
            try:
                with open(out / "error.json", "w", encoding="utf-8") as fh:
                    json.dump(payload, fh, indent=2, sort_keys=True)
                    fh.write("\n")
            except OSError:
                pass
        return code
    print(str(out))
    return 0


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
