"""``trunc-cert`` command-line front end.

Exit codes: 0 ok, 2 invalid config, 3 I/O failure, 4 solver or domain error,
5 measured truncation error above the certified bound.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import bounds as B
from .bsm import eta
from .errors import CertificationViolated, ModelError, NumericalError, ProbeOutsideDomain
from .fd import BoundaryData, FdConfig, Probe, measured_truncation_error, sample_field, solve_ibvp, write_binary
from .ie import IeConfig, evaluate, solve_ie
from .mc import price_mc
from .model import Problem, TruncatedDomain, problem_from_dict
from .report import ITERATION_HEADER, field_header, field_rows, iteration_rows, render, write_csv

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SOLVER, EXIT_VIOLATED = 0, 2, 3, 4, 5

COMMANDS = ("validate", "price", "bounds-compare", "certify", "size-domain")


class UsageError(ModelError):
    pass


def _block(cfg: dict, name: str, required: bool = False) -> dict:
    blk = cfg.get(name)
    if blk is None:
        if required:
            raise UsageError(f"config needs a '{name}' block for this command")
        return {}
    if not isinstance(blk, dict):
        raise UsageError(f"'{name}' block must be an object")
    return blk


def _dataclass_from(cls, blk: dict, **over):
    names = {f.name for f in fields(cls)}
    unknown = set(blk) - names - {"report", "dump", "dump_binary"}
    if unknown:
        raise UsageError(f"unknown keys in {cls.__name__} block: {sorted(unknown)}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in blk.items() if k in names}
    if "s_ranges" in kw and kw["s_ranges"] is not None:
        kw["s_ranges"] = tuple(tuple(x) for x in kw["s_ranges"])
    kw.update(over)
    try:
        return cls(**kw)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc


def _probes(cfg: dict, d: int):
    raw = cfg.get("probes")
    if not raw:
        raise UsageError("config needs a non-empty 'probes' list")
    out = []
    try:
        for p in raw:
            s = tuple(float(x) for x in np.atleast_1d(p["s"]))
            if len(s) != d:
                raise UsageError(f"probe {p} has {len(s)} coordinates, model has d={d}")
            out.append(Probe(float(p["t"]), s, int(p.get("regime", 0))))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed probe: {exc}") from exc
    return out


def _check_regimes(probes, k):
    for p in probes:
        if not 0 <= p.regime < k:
            raise UsageError(f"probe regime {p.regime} outside 0..{k - 1}")


def _boundary(cfg: dict) -> BoundaryData:
    blk = _block(cfg, "boundary")
    return BoundaryData(blk.get("kind", "discounted-linear-envelope"))


def _s_cols(d):
    return [f"s_{l + 1}" for l in range(d)]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_validate(prob: Problem, args) -> str:
    m = prob.model
    rows = []
    for i in range(m.k):
        rows.append(("r", i, "", "", float(m.r[i])))
        rows.append(("lambda_i", i, "", "", float(m.exit_rates[i])))
        for l in range(m.d):
            for q in range(m.d):
                rows.append(("a", i, l + 1, q + 1, float(m.a[i, l, q])))
    for l in range(m.d):
        rows.append(("D", "", l + 1, "", B.diffusion_gap(m, l)))
    return render(("quantity", "regime", "l", "m", "value"), rows)


def cmd_price(prob: Problem, args) -> str:
    cfg = prob.raw
    m, pay, dom = prob.model, prob.payoff, prob.domain
    probes = _probes(cfg, m.d)
    _check_regimes(probes, m.k)
    method = args.method
    head = ("point", "t", *_s_cols(m.d), "regime")
    if method == "mc":
        blk = _block(cfg, "mc")
        n_paths = int(blk.get("n_paths", 100_000))
        batch = int(blk.get("batch_size", 50_000))
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        rows = []
        for n, p in enumerate(probes):
            est = price_mc(m, pay, dom.T, p.t, p.s, p.regime, n_paths, seed + n, args.threads, batch)
            rows.append((n, p.t, *p.s, p.regime, est.mean, est.stderr, est.n_paths, est.seed))
        return render(head + ("mean", "stderr", "n_paths", "seed"), rows)
    if method == "ie":
        blk = _block(cfg, "ie")
        conf = _dataclass_from(IeConfig, blk, workers=args.threads)
        res = solve_ie(m, pay, dom, conf)
        if blk.get("report"):
            write_csv(blk["report"], ITERATION_HEADER, iteration_rows(res.report))
        rows = []
        for n, p in enumerate(probes):
            val = evaluate(res, m, pay, conf, dom.T, p.t, np.asarray(p.s))[p.regime]
            rows.append((n, p.t, *p.s, p.regime, float(val)))
        return render(head + ("value",), rows)
    blk = _block(cfg, "fd")
    conf = _dataclass_from(FdConfig, blk)
    for p in probes:
        if not dom.closure(p.t, p.s):
            raise ProbeOutsideDomain(f"probe t={p.t}, s={p.s} outside the FD domain")
    fld = solve_ibvp(m, pay, dom, _boundary(cfg), conf, prob.bounds)
    if blk.get("dump"):
        write_csv(blk["dump"], field_header(m.d), field_rows(fld))
    if blk.get("dump_binary"):
        write_binary(fld, blk["dump_binary"])
    rows = []
    for n, p in enumerate(probes):
        rows.append((n, p.t, *p.s, p.regime, float(sample_field(fld, p.t, p.s)[0, p.regime])))
    return render(head + ("value",), rows)


def cmd_bounds_compare(prob: Problem, args) -> str:
    blk = _block(prob.raw, "bounds")
    grid = blk.get("grid", {})
    l = int(blk.get("l", 1)) - 1
    g = B.compare_grid(prob.model, prob.domain, int(grid.get("n_t", 200)), int(grid.get("n_s", 200)), l)
    rows = zip(g.t.ravel(), g.s.ravel(), g.psi.ravel(), g.psi_bar.ravel(), g.psi_hat.ravel(), g.in_D.ravel(),
               g.diff.ravel())
    return render(("t", "s", "psi", "psi_bar", "psi_hat", "in_D", "diff"), rows)


def _reference(prob: Problem, blk: dict, args):
    kind = blk.get("reference")
    if kind is None:
        return None
    m, pay, T = prob.model, prob.payoff, prob.domain.T
    if kind == "frozen-bsm":
        if m.k != 1:
            raise UsageError("frozen-bsm reference is exact only for k = 1")
        return lambda t, s, i: eta(m, pay, T, t, s, i)
    if kind == "mc":
        mc = _block(prob.raw, "mc")
        n_paths = int(mc.get("n_paths", 20_000))
        seed = args.seed if args.seed is not None else int(prob.raw.get("seed", 0))

        def ref(t, s, i):
            s = np.asarray(s, dtype=float).reshape(-1, m.d)
            return np.array([price_mc(m, pay, T, t, x, i, n_paths, seed, args.threads).mean for x in s])

        return ref
    raise UsageError(f"unknown far-field reference {kind!r}")


def cmd_certify(prob: Problem, args) -> str:
    m, pay, dom = prob.model, prob.payoff, prob.domain
    probes = _probes(prob.raw, m.d)
    _check_regimes(probes, m.k)
    blk = _block(prob.raw, "bounds")
    boundary = _boundary(prob.raw)
    reference = _reference(prob, blk, args)
    n_t, n_s = int(blk.get("n_t", 33)), int(blk.get("n_s", 33))
    reports = [B.certify_point(m, pay, boundary, dom, p.t, p.s, p.regime, prob.bounds, reference, n_t, n_s)
               for p in probes]
    measured = None
    if args.measure:
        large_hi = np.asarray(blk.get("reference_s_hi", 4.0 * dom.s_hi), dtype=float)
        large = TruncatedDomain(dom.s_lo, large_hi, dom.T)
        conf = _dataclass_from(FdConfig, _block(prob.raw, "fd"))
        measured, _, _ = measured_truncation_error(m, pay, dom, large, boundary, conf, probes, prob.bounds)
    d = m.d
    head = ["point", "t", *_s_cols(d), "regime", *[f"psi_{l + 1}" for l in range(d)],
            *[f"psi_bar_{l + 1}" for l in range(d)], *[f"psi_hat_{l + 1}" for l in range(d)], "in_D",
            "far_bound", "far_bound_v1", "certified", "certified_psi_bar_only"]
    if measured is not None:
        head += ["measured", "dominated"]
    rows = []
    violated = []
    for n, r in enumerate(reports):
        row = [n, r.t, *r.s, r.regime, *r.psi, *r.psi_bar, *r.psi_hat, r.in_D, r.far_bound, r.far_bound_v1,
               r.certified, r.certified_psi_bar_only]
        if measured is not None:
            ok = bool(measured[n] <= r.certified)
            row += [float(measured[n]), ok]
            if not ok:
                violated.append(n)
        rows.append(row)
    text = render(head, rows)
    if violated:
        raise CertificationViolated(text + f"# measured error exceeds certified bound at probes {violated}\n")
    return text


def cmd_size_domain(prob: Problem, args) -> str:
    m = prob.model
    blk = _block(prob.raw, "bounds", required=True)
    if "tolerance" not in blk:
        raise UsageError("bounds block needs 'tolerance'")
    p = _probes(prob.raw, m.d)[0]
    res = B.size_domain(m, prob.payoff, _boundary(prob.raw), prob.domain.T, p.t, p.s, p.regime,
                        float(blk["tolerance"]), prob.bounds, n_t=int(blk.get("n_t", 33)),
                        n_s=int(blk.get("n_s", 33)))
    return render(("c", *[f"s_hi_{l + 1}" for l in range(m.d)], "achieved"), [(res.c, *res.s_hi, res.achieved)])


HANDLERS = {
    "validate": cmd_validate,
    "price": cmd_price,
    "bounds-compare": cmd_bounds_compare,
    "certify": cmd_certify,
    "size-domain": cmd_size_domain,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trunc-cert", description="Regime-switching pricing and truncation bounds.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON config file")
    ap.add_argument("--method", choices=("ie", "mc", "fd"), default="fd")
    ap.add_argument("--measure", action="store_true", help="compare against a two-domain FD measurement")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None, help="write CSV here instead of stdout")
    return ap


def _emit(text: str, out, stream=None):
    if out:
        Path(out).write_text(text)
    else:
        (stream or sys.stdout).write(text)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        cfg = json.loads(text)
        if not isinstance(cfg, dict):
            raise ModelError("config must be a JSON object")
        prob = problem_from_dict(cfg)
        out = HANDLERS[args.command](prob, args)
        _emit(out, args.out)
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CertificationViolated as exc:
        _emit(str(exc), args.out)
        print("error: certification violated", file=sys.stderr)
        return EXIT_VIOLATED
    except NumericalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
