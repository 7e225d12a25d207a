"""Command-line entry point: ``ssvae {verify,estimate,train,ratio}``.

Exit codes: 0 success, 1 failed check or non-convergence, 2 input error,
3 iteration cap reached. Every command writes ``<out>.manifest.json`` next
to its main output; outputs contain no timestamps or host details, so two
identical invocations produce byte-identical files.
"""

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from . import __version__, specfile
from .errors import NonConvergence, SpecError, SSVAEError, ValidationError
from .model import (
    Encoder,
    InfoNCEPrior,
    MIPrior,
    induced_latent_joint,
    induced_latent_marginal,
    random_dims,
    random_instance,
    resolve_prior,
)
from .objectives import (
    elbo_decomposition,
    expected_structured_elbo,
    infonce_exact,
    infonce_finite_n,
    model_evidence,
    structured_elbo,
)
from .prob import marginalize, mutual_information, product
from .ratio import RatioFitConfig, estimated_mutual_information, exact_log_ratio, fit_ratio_classifier
from .trainer import OBJECTIVES, TrainConfig, shared_factor_experiment, train

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_CAP = 0, 1, 2, 3
IDENTITY_TOL = 1e-10


def fmt(x):
    """17 significant digits; integers and labels pass through."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_manifest(out, command, config, seed, outputs):
    doc = {
        "command": command,
        "artifact_version": __version__,
        "seed": seed,
        "config": config,
        "outputs": outputs,
    }
    path = f"{out}.manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def parse_seeds(text):
    """'0..9' (inclusive), '3', or '1,4,7'."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("empty seed list")
    return sorted(set(seeds))


def parse_int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


# --- verify ---------------------------------------------------------------


def _row(check, seed, lhs, rhs, tol=IDENTITY_TOL):
    diff = abs(lhs - rhs)
    return (check, seed, lhs, rhs, diff, tol, bool(diff < tol))


def instance_checks(inst, tag):
    """Identity, decomposition and Jensen rows for one instance."""
    rows = []
    mi_inst = inst.with_prior(MIPrior())
    total, const = expected_structured_elbo(mi_inst)
    rows.append(_row("identity_a", tag, total - const, mutual_information(induced_latent_joint(mi_inst))))
    if isinstance(inst.prior, InfoNCEPrior):
        total, const = expected_structured_elbo(inst)
        rows.append(_row("identity_b", tag, total - const, infonce_exact(inst)))
    mi, kl, const, total = elbo_decomposition(inst)
    rows.append(_row("decomposition", tag, mi - kl + const, total))

    P = resolve_prior(inst)
    D = inst.data_joint
    worst = math.inf
    for c in D.row_space.labels:
        for x in D.col_space.labels:
            elbo, _ = structured_elbo(inst, c, x, P)
            worst = min(worst, model_evidence(inst, c, x, P) - elbo)
    rows.append(("jensen_min_gap", tag, worst, -IDENTITY_TOL, 0.0, IDENTITY_TOL, bool(worst >= -IDENTITY_TOL)))

    det = type(inst)(
        D,
        Encoder(D.row_space, inst.z_space, inst.encoder_c.logits, deterministic=tuple(np.argmax(inst.encoder_c.probs, axis=1))),
        Encoder(D.col_space, inst.zp_space, inst.encoder_x.logits, deterministic=tuple(np.argmax(inst.encoder_x.probs, axis=1))),
        MIPrior(),
    )
    Pd = resolve_prior(det)
    worst = 0.0
    for i, c in enumerate(D.row_space.labels):
        for j, x in enumerate(D.col_space.labels):
            if D.probs[i].sum() > 0 and D.probs[:, j].sum() > 0:
                elbo, _ = structured_elbo(det, c, x, Pd)
                worst = max(worst, abs(model_evidence(det, c, x, Pd) - elbo))
    rows.append(("tightness_deterministic", tag, worst, 0.0, worst, IDENTITY_TOL, bool(worst < IDENTITY_TOL)))
    return rows


def _seed_checks(seed):
    dims = random_dims(seed)
    rows = instance_checks(random_instance(dims, seed, "infonce"), seed)
    rows += [r for r in instance_checks(random_instance(dims, seed, "table"), seed) if r[0] == "decomposition"]
    return rows


def cmd_verify(args):
    try:
        inst, spec_seed = specfile.load(args.spec)
        seeds = parse_seeds(args.seeds)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: bad --seeds: {exc}", file=sys.stderr)
        return EXIT_INPUT
    rows = instance_checks(inst, "spec")
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            per_seed = list(pool.map(_seed_checks, seeds))
    else:
        per_seed = [_seed_checks(s) for s in seeds]
    for r in per_seed:
        rows.extend(r)
    write_csv(args.out, ("check", "instance_seed", "lhs", "rhs", "abs_diff", "tolerance", "pass"), rows)
    write_manifest(args.out, "verify", {"spec": args.spec, "seeds": seeds}, spec_seed, [args.out])
    failed = [r for r in rows if not r[-1]]
    for r in failed:
        print(f"FAIL {r[0]} seed={r[1]} |diff|={fmt(r[4])}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


# --- estimate -------------------------------------------------------------


def cmd_estimate(args):
    try:
        inst, spec_seed = specfile.load(args.spec)
        ns = parse_int_list(args.negatives)
        if not ns or min(ns) < 1 or args.mc_reps < 1:
            raise ValueError("negatives and mc-reps must be >= 1")
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if not isinstance(inst.prior, InfoNCEPrior):
        print("error: estimate needs a spec with an InfoNCE prior (coupling)", file=sys.stderr)
        return EXIT_INPUT
    seed = spec_seed if args.seed is None else args.seed
    exact = infonce_exact(inst)
    rows = []
    for n in ns:
        est, se = infonce_finite_n(inst, n, args.mc_reps, seed)
        rows.append((n, est, se, exact, abs(est - exact)))
    write_csv(args.out, ("n_negatives", "estimate", "std_error", "exact", "gap"), rows)
    plot = f"{args.out}.plot.dat"
    with open(plot, "w", encoding="utf-8") as fh:
        fh.write("# n_negatives gap\n")
        for n, _, _, _, gap in rows:
            fh.write(f"{n} {fmt(gap)}\n")
    config = {"spec": args.spec, "negatives": ns, "mc_reps": args.mc_reps}
    write_manifest(args.out, "estimate", config, seed, [args.out, plot])
    return EXIT_OK


# --- train ----------------------------------------------------------------


def cmd_train(args):
    try:
        config = TrainConfig(
            objective=args.objective,
            step_size=args.step_size,
            max_iters=args.max_iters,
            tolerance=args.tol,
            seed=args.seed,
        )
        if args.spec:
            inst, seed = specfile.load(args.spec)
            if args.objective == "elbo-mi":
                inst = inst.with_prior(MIPrior())
            trace = train(inst, config)
        else:
            seed = args.seed
            latent = args.latent_count if args.latent_count is not None else args.s_count
            trace = shared_factor_experiment(
                args.s_count, args.noise_count, args.noise_level, latent, args.objective, seed,
                config=config, restarts=args.restarts,
            )
        code = EXIT_OK
    except (SpecError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonConvergence as exc:
        trace = exc.trace
        code = EXIT_CAP
    write_csv(args.out, ("iteration", "objective", "mi_z_s", "gradient_norm", "step_size"), trace.rows())
    model_path = f"{args.out}.model.json"
    specfile.save(trace.instance, model_path, seed=seed)
    cfg = asdict(config)
    cfg.update(spec=args.spec, s_count=args.s_count, noise_count=args.noise_count,
               noise_level=args.noise_level, latent_count=args.latent_count, restarts=args.restarts,
               chosen_restart=trace.restart, restart_objectives=[fmt(v) for v in trace.restart_objectives])
    write_manifest(args.out, "train", cfg, seed, [args.out, model_path])
    return code


# --- ratio ----------------------------------------------------------------


def cmd_ratio(args):
    try:
        inst, spec_seed = specfile.load(args.spec)
        if args.target == "joint":
            p = induced_latent_joint(inst)
            q = product(marginalize(p, "row"), marginalize(p, "col"))
        else:
            p = marginalize(resolve_prior(inst), "row")
            q = induced_latent_marginal(inst, "c")
    except (SpecError, SSVAEError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    code = EXIT_OK
    try:
        clf = fit_ratio_classifier(p, q, RatioFitConfig(tolerance=args.tol, max_iters=args.max_iters))
    except NonConvergence as exc:
        clf = exc.result
        code = EXIT_FAIL
        print(f"error: {exc}", file=sys.stderr)
    exact = exact_log_ratio(p, q).ravel()
    pp, qq = np.asarray(p.probs).ravel(), np.asarray(q.probs).ravel()
    rows, diffs = [], []
    for lab, pi, qi, e, lg, used in zip(clf.labels, pp, qq, exact, clf.logits.ravel(), clf.mask.ravel()):
        name = "|".join(lab) if isinstance(lab, tuple) else str(lab)
        d = abs(e - lg) if used else float("nan")
        if used:
            diffs.append(d)
        rows.append((name, pi, qi, e, lg, d, bool(used)))
    write_csv(args.out, ("cell", "p", "q", "exact_log_ratio", "logit", "abs_diff", "used"), rows)
    summary = [
        ("target", args.target),
        ("cells", len(rows)),
        ("excluded_cells", sum(1 for r in rows if not r[-1])),
        ("max_abs_diff", max(diffs) if diffs else float("nan")),
        ("iterations", clf.iterations),
        ("converged", code == EXIT_OK),
    ]
    if args.target == "joint":
        summary += [
            ("estimated_mi", estimated_mutual_information(clf, p)),
            ("exact_mi", mutual_information(p)),
        ]
    summary_path = f"{args.out}.summary.csv"
    write_csv(summary_path, ("key", "value"), summary)
    write_manifest(args.out, "ratio", {"spec": args.spec, "target": args.target, "tol": args.tol, "max_iters": args.max_iters},
                   spec_seed, [args.out, summary_path])
    return code


def build_parser():
    parser = argparse.ArgumentParser(prog="ssvae", description="Exact SSVAE objective laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="check the ELBO identities on a spec and seeded instances")
    v.add_argument("--spec", required=True)
    v.add_argument("--seeds", default="0..9")
    v.add_argument("--out", required=True)
    v.add_argument("--parallel", type=int, default=1)
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("estimate", help="finite-N InfoNCE estimates against the exact value")
    e.add_argument("--spec", required=True)
    e.add_argument("--negatives", default="1,4,16,64,256")
    e.add_argument("--mc-reps", type=int, default=20000)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_estimate)

    t = sub.add_parser("train", help="gradient ascent on an objective")
    t.add_argument("--spec")
    t.add_argument("--objective", choices=OBJECTIVES, default="infonce-exact")
    t.add_argument("--s-count", type=int, default=4)
    t.add_argument("--noise-count", type=int, default=2)
    t.add_argument("--noise-level", type=float, default=0.0)
    t.add_argument("--latent-count", type=int)
    t.add_argument("--step-size", type=float, default=1.0)
    t.add_argument("--max-iters", type=int, default=10_000)
    t.add_argument("--tol", type=float, default=1e-8)
    t.add_argument("--restarts", type=int, default=1, help="generator runs only: keep the best of N initializations")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("ratio", help="fit a classifier to a latent density ratio")
    r.add_argument("--spec", required=True)
    r.add_argument("--target", choices=("marginal", "joint"), default="joint")
    r.add_argument("--tol", type=float, default=RatioFitConfig.tolerance)
    r.add_argument("--max-iters", type=int, default=RatioFitConfig.max_iters)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_ratio)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
