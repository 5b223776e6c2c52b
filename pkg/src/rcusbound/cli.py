"""Command-line interface: ``rcusbound {eval,sweep,power,accuracy,scenario validate}``.

Configuration files are TOML with ``[scenario]``, ``[network]`` (MIMO
only), ``[link]``, ``[sweep]`` and ``[run]`` tables; see the README.
Command-line flags override the ``[run]`` table.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .channel_mimo import network_config_from_table
from .density import nats_to_bits
from .experiments import (
    METHODS,
    CampaignSpec,
    MimoScenario,
    SisoScenario,
    Evaluator,
    _row,
    canonical_method,
    linear_to_db,
    link_from_table,
    min_samples_for_accuracy,
    required_power,
    run_campaign,
    with_s_optimization,
    write_csv,
    evaluate,
)
from .numerics import StreamKey

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

_SECTIONS = {"scenario", "network", "link", "sweep", "run"}


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    unknown = set(data) - _SECTIONS
    if unknown:
        raise ValueError(f"unknown config tables: {sorted(unknown)}")
    return data


def scenario_from_config(data: dict):
    sc = data.get("scenario", {})
    kind = sc.get("kind", "siso")
    if kind == "siso":
        if "network" in data:
            raise ValueError("[network] is only valid for kind = 'mimo'")
        return SisoScenario(sc.get("id", "siso"))
    if kind == "mimo":
        cfg = network_config_from_table(data.get("network", {}))
        return MimoScenario(cfg, int(sc.get("cell", 0)), int(sc.get("user", 0)), sc.get("id", "mimo"))
    raise ValueError(f"unknown scenario kind {kind!r}")


def spec_from_config(data: dict, args) -> CampaignSpec:
    run = dict(data.get("run", {}))
    sweep = dict(data.get("sweep", {}))
    lp = link_from_table(data.get("link", {}), getattr(args, "rate_unit", None))
    method = args.method or run.get("method", "sp_nb")
    bracket = sweep.get("rho_bracket_db", [-10.0, 30.0])
    np_range = sweep.get("np_range")
    return CampaignSpec(
        scenario=scenario_from_config(data),
        method=method,
        sweep=sweep.get("parameter", "power"),
        grid=list(sweep.get("grid", [linear_to_db(lp.rho)])),
        link=lp,
        samples=int(args.samples or run.get("samples", 100_000)),
        seed=int(args.seed if args.seed is not None else run.get("seed", 1)),
        workers=int(args.workers or run.get("workers", 1)),
        target_epsilon=getattr(args, "target", None) or sweep.get("target_epsilon"),
        optimize_s=bool(sweep.get("optimize_s", False)),
        optimize_np=bool(sweep.get("optimize_np", False)),
        np_range=tuple(range(int(np_range[0]), int(np_range[1]) + 1)) if np_range else None,
        rho_bracket_dB=tuple(float(x) for x in bracket),
        blocklength=int(data.get("link", {}).get("blocklength", lp.n_c * lp.n_b)),
    )


def _emit(rows, out):
    text = write_csv(rows, out)
    if out is None:
        sys.stdout.write(text)


def cmd_eval(args) -> int:
    spec = spec_from_config(load_config(args.config), args)
    res = evaluate(spec.method, spec.scenario, spec.link, spec.samples, StreamKey(spec.seed), spec.workers)
    _emit([_row(spec, spec.link, res)], args.out)
    return 0


def cmd_sweep(args) -> int:
    spec = spec_from_config(load_config(args.config), args)
    _emit(run_campaign(spec), args.out)
    return 0


def cmd_power(args) -> int:
    spec = spec_from_config(load_config(args.config), args)
    if spec.target_epsilon is None:
        raise SystemExit("power needs --target or [sweep] target_epsilon")
    ev = Evaluator(spec.method, spec.scenario, spec.samples, StreamKey(spec.seed), spec.workers)
    inner = with_s_optimization(ev) if spec.optimize_s else ev
    rho = required_power(inner, spec.link, spec.target_epsilon, spec.rho_bracket_dB)
    lp = replace(spec.link, rho=rho)
    _emit([_row(spec, lp, ev.result(lp))], args.out)
    return 0


def cmd_accuracy(args) -> int:
    spec = spec_from_config(load_config(args.config), args)
    key = StreamKey(spec.seed)
    if args.reference is not None:
        ref = float(args.reference)
    else:
        ref = evaluate(spec.method, spec.scenario, spec.link, args.reference_samples, key.child(1 << 20),
                       spec.workers).epsilon
    res = min_samples_for_accuracy(spec.method, spec.scenario, spec.link, key, reference=ref,
                                   threshold=args.threshold, n_sim=args.n_sim, n_start=args.n_start,
                                   cap=args.cap, workers=spec.workers)
    report = {"method": spec.method, "reference": ref, "status": res.status, "n_min": res.n_min,
              "trace": [{"N": n, "n_gauss_used": u, "e": e} for n, u, e in res.trace]}
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_validate(args) -> int:
    try:
        data = load_config(args.config)
        spec = spec_from_config(data, args)
        if isinstance(spec.scenario, MimoScenario):
            spec.scenario.sampler(spec.link)
    except (ValueError, TypeError, KeyError, tomllib.TOMLDecodeError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    lp = spec.link
    print(f"ok: scenario={getattr(spec.scenario, 'scenario_id', '?')} method={spec.method} "
          f"sweep={spec.sweep} points={len(spec.grid)} n_b={lp.n_b} n_c={lp.n_c} n_p={lp.n_p} "
          f"rate={nats_to_bits(lp.rate):.6g} bits")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rcusbound", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="TOML scenario/campaign file")
        sp.add_argument("--method", choices=METHODS + ("saddlepoint_ns", "saddlepoint_nb", "oracle"),
                        type=canonical_method)
        sp.add_argument("--samples", type=int, help="Monte-Carlo units (draws or trials)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out", help="output file (CSV; JSON for accuracy)")
        sp.add_argument("--rate-unit", choices=("bits", "nats"), dest="rate_unit")

    for name, fn, helptext in (("eval", cmd_eval, "evaluate one operating point"),
                               ("sweep", cmd_sweep, "evaluate a one-dimensional grid"),
                               ("power", cmd_power, "required transmit power for a target")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        if name == "power":
            sp.add_argument("--target", type=float, help="target error probability")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("accuracy", help="accuracy metric e(N) and N_min")
    common(sp)
    sp.add_argument("--reference", type=float, help="reference epsilon (default: long run of the method)")
    sp.add_argument("--reference-samples", type=int, default=1_000_000, dest="reference_samples")
    sp.add_argument("--threshold", type=float, default=0.005)
    sp.add_argument("--n-sim", type=int, default=100, dest="n_sim")
    sp.add_argument("--n-start", type=int, default=1 << 10, dest="n_start")
    sp.add_argument("--cap", type=int, default=1 << 26)
    sp.set_defaults(func=cmd_accuracy)

    sp = sub.add_parser("scenario", help="scenario file utilities")
    ssub = sp.add_subparsers(dest="action", required=True)
    v = ssub.add_parser("validate", help="parse and check a config file")
    common(v)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
