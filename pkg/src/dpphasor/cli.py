"""Command-line entry point: ``dpphasor <command> [options]``.

Exit status: 0 success, 1 input error, 2 numerical failure, 3 privacy
inadmissibility. Results are JSON on stdout unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from dpphasor import accountant as acc
from dpphasor.errors import InadmissibleError, InputError, NumericalError
from dpphasor.evaluation import ExperimentConfig, panel_loads, release_w1, run_sweep, wasserstein1
from dpphasor.grid import load_feeder, network_stats, reduce_network
from dpphasor.loads import DpFitConfig, LoadClassModel, fit_load_model, load_panel_csv
from dpphasor.mechanisms import (
    MechanismKind,
    daily_irradiance,
    read_release,
    release_dp_powerflow,
    release_gaussian_voltage,
    release_joint_voltage,
    release_noise_free,
    release_noisy_loads_plus_gauss,
    spec_with_class_power_factors,
    write_release,
)
from dpphasor.powerflow import InjectionSpec, PowerFlowConfig, feasibility_audit
from dpphasor.reference import load_irradiance_csv, write_reference_inputs

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_INADMISSIBLE = 0, 1, 2, 3


def _cmat(z) -> dict:
    z = np.asarray(z, dtype=complex)
    return {"re": z.real.tolist(), "im": z.imag.tolist()}


def _emit(doc, out):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _opt(args, name, default=None):
    """Command-line value, else the ``--config`` value, else ``default``."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return args.config_doc.get(name, default)


def _need(args, name):
    v = _opt(args, name)
    if v is None:
        raise InputError(f"--{name.replace('_', '-')} is required")
    return v


def _irradiance(args, T):
    path = _opt(args, "irradiance")
    return np.zeros(T) if path is None else load_irradiance_csv(path)


def _feeder_classes(net):
    loads = [b for b in net.buses if b.kind == "load"]
    theta = {b.id: b.power_factor_deg for b in loads}
    assignment = {b.id: b.class_id for b in loads} if all(b.class_id is not None for b in loads) else None
    return theta, assignment


def _m_tilde(args, red, spec, stats, net, r, h_max):
    """Explicit ``--m-tilde``, a calibration file, or the closed-form bound."""
    if _opt(args, "m_tilde") is not None:
        return float(_opt(args, "m_tilde")), "user", 0.0
    cal = _opt(args, "calibration")
    if cal is not None:
        doc = json.loads(Path(cal).read_text())
        return float(doc["mu0"]), "monte-carlo", float(doc["delta_m_upper"])
    c_vv = acc.voltvar_constant(spec, h_max, net.v_min, net.v_max)
    return acc.m_tilde_closed_form(stats, net.v_min, net.v_max, red.kappa_kron, r, red.n, c_vv), "closed-form", 0.0


# -- commands -----------------------------------------------------------------

def cmd_kron(args):
    net = load_feeder(_need(args, "feeder"))
    red = reduce_network(net)
    st = network_stats(red)
    _emit({
        "slack": red.slack_id,
        "buses": [red.slack_id, *red.retained_ids],
        "eliminated": list(red.zero_ids),
        # Schur complement over slack + retained buses
        "y_reduced": _cmat(red.y_kron),
        # the block the power flow runs on, and the slack coupling column
        "y_powerflow": _cmat(red.y_reduced),
        "b": _cmat(red.b),
        "phi": _cmat(red.phi),
        "kappa": red.kappa_kron,
        "stats": {"d_max": st.d_max, "sigma_min_y": st.sigma_min_y,
                  "flat_mismatch": st.flat_mismatch, "row_sum_norm": st.row_sum_norm},
    }, args.out)


def _model(args, net, panel=None):
    path = _opt(args, "model")
    if path is not None:
        return LoadClassModel.load(path)
    panel = panel or load_panel_csv(_need(args, "panel"))
    theta, assignment = _feeder_classes(net)
    return fit_load_model(panel, int(_opt(args, "classes", 3)), DpFitConfig(), args.seed, theta, assignment)


def cmd_audit(args):
    net = load_feeder(_need(args, "feeder"))
    red = reduce_network(net)
    model = _model(args, net)
    h = _irradiance(args, model.T)
    rep = feasibility_audit(red, InjectionSpec.for_network(net), model, net.retained_ids, PowerFlowConfig(),
                            int(_opt(args, "samples", 200)), args.seed, float(h.max()))
    _emit(rep.to_dict(), args.out)
    if not rep.passed:
        raise NumericalError("feasibility audit failed; see the report")


def cmd_fit(args):
    panel = load_panel_csv(_need(args, "panel"))
    theta, assignment = {}, None
    if _opt(args, "feeder") is not None:
        theta, assignment = _feeder_classes(load_feeder(_opt(args, "feeder")))
    cfg = DpFitConfig(
        eps_load=float(_opt(args, "eps_load", math.inf)),
        delta_load=float(_opt(args, "delta_load", 1e-5)),
        mean_fraction=float(_opt(args, "mean_fraction", 0.5)),
        noise_floor=bool(_opt(args, "noise_floor", False)),
    )
    model = fit_load_model(panel, int(_opt(args, "classes", 3)), cfg, args.seed, theta, assignment)
    _emit(model.to_dict(), args.out)


def _privacy_report(args, net, red, model):
    stats = network_stats(red)
    spec = InjectionSpec.for_network(net)
    r = float(_need(args, "r"))
    h = _irradiance(args, model.T)
    mt, source, delta_m = _m_tilde(args, red, spec, stats, net, r, float(h.max()) if h.size else 0.0)
    return acc.epsilon_total(
        r, float(_opt(args, "delta", 1e-3)), red.kappa_kron, model.classes, mt, red.n, model.T,
        net.v_min, net.v_max, stats.d_max, source, delta_m, notes=acc.STANDARD_NOTES,
    )


def cmd_privacy(args):
    net = load_feeder(_need(args, "feeder"))
    red = reduce_network(net)
    model = _model(args, net)
    rep = _privacy_report(args, net, red, model)
    _emit(rep.to_dict(), args.out)


def cmd_calibrate(args):
    net = load_feeder(_need(args, "feeder"))
    red = reduce_network(net)
    model = _model(args, net)
    spec = spec_with_class_power_factors(InjectionSpec.for_network(net), model, net.retained_ids)
    h = _irradiance(args, model.T)
    res = acc.mc_calibrate(
        red, model, spec, net.retained_ids, h, float(_need(args, "mu0")), int(_opt(args, "n_traj", 59)),
        float(_opt(args, "confidence", 0.95)), red.kappa_kron, float(_need(args, "r")), args.seed,
    )
    _emit(res.to_dict(), args.out)


def cmd_release(args):
    kind = MechanismKind(_need(args, "mechanism"))
    net = load_feeder(_need(args, "feeder"))
    red = reduce_network(net)
    bus_ids = net.retained_ids
    spec = InjectionSpec.for_network(net)
    days = int(_opt(args, "days", 1))
    rng = np.random.default_rng(args.seed)
    out = args.out or "release"
    eps = float(_opt(args, "eps", math.inf))
    eps_load = float(_opt(args, "eps_load", math.inf))
    delta = float(_opt(args, "delta", 1e-3))
    pf = PowerFlowConfig()

    if kind in (MechanismKind.DP_POWERFLOW, MechanismKind.DPGMM_PLUS_GAUSS):
        model = LoadClassModel.load(_need(args, "model"))
        h = _irradiance(args, model.T)
        rep = _privacy_report(args, net, red, model) if _opt(args, "r") is not None else None
        eps_day = rep.epsilon if rep else math.nan
        delta_day = rep.delta_total if rep else math.nan
        rel = release_dp_powerflow(red, model, spec, bus_ids, h, days, rng, pf, eps_day, delta_day, args.seed)
        if kind is MechanismKind.DPGMM_PLUS_GAUSS:
            sens = _sensitivities(args, net, red, model)
            rel = release_gaussian_voltage(rel, sens.delta2_y, eps, delta, rng, MechanismKind.DPGMM_PLUS_GAUSS)
    else:
        panel = load_panel_csv(_need(args, "panel"))
        loads = panel_loads(panel, bus_ids)[:days]
        h = daily_irradiance(_irradiance(args, panel.steps_per_day), panel.n_days, panel.steps_per_day)[:days]
        truth = release_noise_free(red, spec, loads, h, bus_ids, pf)
        if kind is MechanismKind.NOISE_FREE:
            rel = truth
        else:
            model = _model(args, net, panel)
            sens = _sensitivities(args, net, red, model)
            if kind is MechanismKind.JOINT_VOLTAGE_NOISE:
                rel = release_joint_voltage(truth, sens.delta2_y, sens.delta2_load, eps, eps_load, delta, rng)
            else:
                lo, hi = _bus_margins(model, bus_ids)
                rel = release_noisy_loads_plus_gauss(
                    red, spec, loads, h, bus_ids, lo, hi, sens.delta_load, eps_load, delta,
                    sens.delta2_y, eps, delta, rng, pf,
                )
    rel = type(rel)(rel.voltages, rel.kind, rel.eps_day, rel.delta_day, rel.bus_ids, args.seed, rel.metadata)
    paths = write_release(rel, out)
    _emit({"written": [str(p) for p in paths], **rel.sidecar()}, None)


def _bus_margins(model, bus_ids):
    index = {b: i for i, b in enumerate(bus_ids)}
    lo = np.zeros(len(bus_ids))
    hi = np.zeros(len(bus_ids))
    for c in model.classes:
        for m in c.members:
            lo[index[m]], hi[index[m]] = c.p_min, c.p_max
    return lo, hi


def _sensitivities(args, net, red, model):
    stats = network_stats(red)
    spec = InjectionSpec.for_network(net)
    r = float(_need(args, "r"))
    h = _irradiance(args, model.T)
    mt, _, _ = _m_tilde(args, red, spec, stats, net, r, float(h.max()))
    dl = max(c.p_max for c in model.classes) - min(c.p_min for c in model.classes)
    return acc.baseline_sensitivities(net.v_min, net.v_max, red.n, red.kappa_kron, r, mt, dl,
                                      int(spec.load_mask.sum()), model.T)


def cmd_evaluate(args):
    a = read_release(args.release_a)
    b = read_release(args.release_b)
    pooling = _opt(args, "pooling", "pooled")
    if pooling == "pooled":
        w = wasserstein1(a.magnitudes(), b.magnitudes())
    else:
        w = release_w1(a, b.magnitudes(), pooling)
    _emit({"w1": w, "pooling": pooling, "a": a.kind.value, "b": b.kind.value}, args.out)


def cmd_sweep(args):
    if args.config is None:
        raise InputError("sweep needs --config <experiment.json>")
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed_given:
        changes["seed"] = args.seed
    if args.out:
        changes["output_dir"] = args.out
    if getattr(args, "repetitions", None):
        changes["repetitions"] = args.repetitions
    if changes:
        cfg = ExperimentConfig(**{**cfg.__dict__, **changes})
    rep = run_sweep(cfg)
    if not cfg.output_dir:
        sys.stdout.write(rep.to_json())
    else:
        _emit({"report": str(Path(cfg.output_dir) / "report.json"),
               "ordering_holds": rep.ordering_holds, "eps_grid": rep.eps_grid}, None)


def cmd_reference(args):
    cfg = write_reference_inputs(args.out or "reference", days=int(_opt(args, "days", 730)), seed=args.seed)
    _emit(cfg, None)


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--config", default=None, help="JSON file with option defaults / experiment config")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dpphasor", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=func)
        return sp

    sp = add("kron", cmd_kron, "Kron-reduce a feeder and report network constants")
    sp.add_argument("feeder", nargs="?")

    def model_opts(sp):
        sp.add_argument("--feeder")
        sp.add_argument("--model", help="fitted load model JSON")
        sp.add_argument("--panel", help="load panel CSV (fits a non-private model if --model is absent)")
        sp.add_argument("--classes", type=int)
        sp.add_argument("--irradiance")

    sp = add("audit-feasibility", cmd_audit, "check operating assumptions on sampled operating points")
    model_opts(sp)
    sp.add_argument("--samples", type=int)

    sp = add("fit", cmd_fit, "fit the private per-class load model")
    sp.add_argument("--panel")
    sp.add_argument("--feeder")
    sp.add_argument("--classes", type=int)
    sp.add_argument("--eps-load", dest="eps_load", type=float)
    sp.add_argument("--delta-load", dest="delta_load", type=float)
    sp.add_argument("--mean-fraction", dest="mean_fraction", type=float)
    sp.add_argument("--noise-floor", dest="noise_floor", action="store_true", default=None)

    def privacy_opts(sp):
        sp.add_argument("--r", type=float)
        sp.add_argument("--delta", type=float)
        sp.add_argument("--m-tilde", dest="m_tilde", type=float)
        sp.add_argument("--calibration", help="calibration JSON from `calibrate`")

    sp = add("privacy-audit", cmd_privacy, "compute the admittance privacy guarantee")
    model_opts(sp)
    privacy_opts(sp)

    sp = add("calibrate", cmd_calibrate, "Monte Carlo calibration of the ||M^-1|| threshold")
    model_opts(sp)
    sp.add_argument("--r", type=float)
    sp.add_argument("--mu0", type=float)
    sp.add_argument("--n-traj", dest="n_traj", type=int)
    sp.add_argument("--confidence", type=float)

    sp = add("release", cmd_release, "produce a voltage release")
    model_opts(sp)
    privacy_opts(sp)
    sp.add_argument("--mechanism", choices=[k.value for k in MechanismKind])
    sp.add_argument("--days", type=int)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--eps-load", dest="eps_load", type=float)

    sp = add("evaluate", cmd_evaluate, "W1 between the voltage magnitudes of two releases")
    sp.add_argument("release_a")
    sp.add_argument("release_b")
    sp.add_argument("--pooling", choices=["pooled", "per-bus"])

    sp = add("sweep", cmd_sweep, "run the full W1 experiment")
    sp.add_argument("--repetitions", type=int)

    sp = add("reference", cmd_reference, "write the in-repo reference feeder, panel and config")
    sp.add_argument("--days", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.config_doc = {}
        if args.config and args.command != "sweep":
            args.config_doc = {k.replace("-", "_"): v for k, v in json.loads(Path(args.config).read_text()).items()}
        args.seed_given = args.seed is not None
        if args.seed is None:
            args.seed = int(args.config_doc.get("seed", 0))
        if args.command == "kron" and args.feeder is None:
            args.feeder = args.config_doc.get("feeder")
        args.func(args)
    except InadmissibleError as exc:
        print(f"inadmissible: {exc}", file=sys.stderr)
        return EXIT_INADMISSIBLE
    except (InputError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
