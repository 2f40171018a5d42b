"""Command-line entry point: ``geoblock <command> ...``.

Exit codes: 0 success, 1 a check or verification failed, 2 bad usage.
Every JSON artifact is written with sorted keys and no timings, so two runs
with the same seed and arguments produce identical bytes.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import blocking, connector, fermi, pipeline, surgery
from . import geodesicflow as gf
from .errors import GeoblockError, StaleMetric
from .metricfield import load_metric, parse_point, save_metric, validate_metric

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("geoblock")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument helpers


def _point(text):
    try:
        return parse_point(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _points(text):
    """Semicolon-separated list of points, e.g. ``0.1,0.2;0.3,0.4``."""
    parts = [p for p in str(text).split(";") if p.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("expected at least one point")
    return [_point(p) for p in parts]


def _disc(text):
    try:
        vals = [float(s) for s in text.split(",")]
    except ValueError:
        vals = []
    if len(vals) != 3 or vals[2] <= 0:
        raise argparse.ArgumentTypeError(f"expected cx,cy,r with r > 0, got {text!r}")
    return (np.array(vals[:2]), vals[2])


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return v


def _floats(text):
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _jobs_default():
    raw = os.environ.get("GEOBLOCK_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _metric(path):
    if not os.path.exists(path):
        raise UsageError(f"metric file not found: {path}")
    try:
        return load_metric(path)
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read metric {path}: {e}") from None


def _load_json(path, what):
    if not os.path.exists(path):
        raise UsageError(f"{what} file not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise UsageError(f"{what} file {path} is not valid JSON: {e}") from None


def dumps(obj):
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _emit(obj, out=None):
    text = dumps(obj)
    if out:
        _ensure_parent(out)
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _ensure_parent(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def write_trajectory(seg, path):
    """CSV with columns t, q1, q2, v1, v2 (chart coordinates, unwrapped)."""
    _ensure_parent(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "q1", "q2", "v1", "v2"])
        for t, q, v in zip(seg.t, seg.q, seg.v):
            w.writerow([repr(float(t)), repr(float(q[0])), repr(float(q[1])), repr(float(v[0])), repr(float(v[1]))])


def _segment(g, x, theta, length, dt=gf.DT_SAMPLE):
    return gf.integrate_from_angle(g, x, theta, length, dt=dt, check_unit=False)


def _pmap(fn, items, jobs):
    """Ordered map; results come back in input order whatever ``jobs`` is."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _family_from(args, g):
    if args.family:
        data = _load_json(args.family, "family")
        entries = data["geodesics"] if isinstance(data, dict) else data
        return [_segment(g, args.x, e["theta0"], e["length"]) for e in entries]
    cs = connector.find_geodesics(g, args.x, args.y, args.lmax)
    return list(cs.geodesics)


# --------------------------------------------------------------------------
# commands


def cmd_metric_validate(args):
    g = _metric(args.metric)
    rep = validate_metric(g, grid=args.grid)
    rep["metric_id"] = g.metric_id
    _emit(rep, args.out)
    return EXIT_OK if rep["spd"] and rep["periodic"] else EXIT_FAIL


def cmd_geodesic_shoot(args):
    g = _metric(args.metric)
    if args.v is not None:
        theta = math.atan2(args.v[1], args.v[0])
    else:
        theta = args.theta
    seg = _segment(g, args.x, theta, args.length, dt=args.dt)
    summary = {
        "metric_id": g.metric_id,
        "x": args.x,
        "theta0": seg.theta0,
        "length": seg.length,
        "end": seg.end,
        "end_velocity": seg.end_velocity,
        "unit_speed_deviation": gf.unit_speed_deviation(g, seg),
    }
    if args.csv:
        write_trajectory(seg, args.csv)
        summary["trajectory"] = args.csv
    _emit(summary, args.out)
    return EXIT_OK


def cmd_connect(args):
    g = _metric(args.metric)
    cs = connector.find_geodesics(g, args.x, args.y, args.lmax)
    d = cs.to_dict()
    d["count"] = len(cs)
    if args.csv_dir:
        paths = []
        for k, s in enumerate(cs):
            p = os.path.join(args.csv_dir, f"geodesic_{k:03d}.csv")
            write_trajectory(s, p)
            paths.append(p)
        d["trajectories"] = paths
    _emit(d, args.out)
    return EXIT_OK


def cmd_block_check(args):
    g = _metric(args.metric)
    family = _family_from(args, g)
    P = args.points if args.points else blocking.midpoint_classes(args.x, args.y)
    q = blocking.BlockingQuery(args.x, args.y, list(P), family, eps_block=args.eps)
    v = blocking.is_blocking_set(q)
    out = v.to_dict()
    out.update(points=[np.asarray(p).tolist() for p in q.P], family_size=len(family))
    if v.index is not None:
        out["witness"] = {"theta0": family[v.index].theta0, "length": family[v.index].length}
    _emit(out, args.out)
    return EXIT_OK if v.blocked else EXIT_FAIL


def cmd_scheck(args):
    g = _metric(args.metric)
    family = _family_from(args, g)
    conds = tuple(c.strip() for c in args.conditions.split(",") if c.strip())
    bad = [c for c in conds if c not in ("i", "ii", "iii", "iv")]
    if bad:
        raise UsageError(f"unknown condition(s) {bad}; choose from i, ii, iii, iv")
    rep = blocking.check_S_conditions(g, args.x, args.y, family, conditions=conds)
    d = rep.to_dict()
    d["family"] = [{"theta0": s.theta0, "length": s.length} for s in family]
    d["passes"] = rep.passes(conds)
    d["first_failure"] = rep.first_failure(conds)
    _emit(d, args.out)
    return EXIT_OK if d["passes"] else EXIT_FAIL


def _fermi_arg(path, g):
    d = _load_json(path, "Fermi patch")
    try:
        return fermi.fermi_from_dict(d, g)
    except KeyError as e:
        raise UsageError(f"Fermi patch {path} lacks field {e}") from None


def cmd_surgery_merge_foliations(args):
    g = _metric(args.metric)
    f1 = _fermi_arg(args.f1, g)
    f2 = _fermi_arg(args.f2, g)
    f0 = _fermi_arg(args.f0, g) if args.f0 else None
    res = surgery.merge_foliations(g, f1, f2, f0, neighborhood_budget=args.budget)
    save_metric(res.metric, args.out_metric)
    out = {"metric": args.out_metric, "metric_id": res.metric.metric_id, "audit": res.audit}
    ok = True
    if args.check:
        concl = res.conclusions()
        out["conclusions"] = concl
        ok = max(concl.values()) <= surgery.TAU_RES
    _emit(out, args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_surgery_merge_geodesics(args):
    g = _metric(args.metric)
    s1 = _segment(g, args.x1, args.theta1, args.length)
    s2 = _segment(g, args.x2, args.theta2, args.length)
    audit = []
    g2, merged = surgery.merge_geodesics(g, s1, s2, args.u, args.t0, audit=audit)
    save_metric(g2, args.out_metric)
    out = {"metric": args.out_metric, "metric_id": g2.metric_id, "audit": audit,
           "merged": {"start": merged.start, "end": merged.end, "length": merged.length}}
    if args.csv:
        write_trajectory(merged, args.csv)
        out["trajectory"] = args.csv
    _emit(out, args.out)
    return EXIT_OK


def cmd_surgery_deconjugate(args):
    g = _metric(args.metric)
    seg = _segment(g, args.x, args.theta, args.length)
    marks = args.marks if args.marks else [0.0, seg.length]
    audit = []
    g2 = surgery.destroy_conjugacy(g, seg, marks, args.s0, args.u, audit=audit)
    after = gf.conjugacy(g2, _segment(g2, args.x, args.theta, args.length), marks[0], marks[-1],
                         raise_inconclusive=False)
    save_metric(g2, args.out_metric)
    _emit({"metric": args.out_metric, "metric_id": g2.metric_id, "audit": audit,
           "conjugacy_after": after.to_dict()}, args.out)
    return EXIT_OK if after.verdict == "nonconjugate" else EXIT_FAIL


def cmd_surgery_avoid(args):
    g = _metric(args.metric)
    seg = _segment(g, args.x, args.theta, args.length)
    audit = []
    g2, new = surgery.avoid_points(g, seg, args.z, args.s0, args.u, args.w1, args.w2,
                                   eps_avoid=args.eps, audit=audit)
    save_metric(g2, args.out_metric)
    out = {"metric": args.out_metric, "metric_id": g2.metric_id, "audit": audit,
           "geodesic": {"theta0": new.theta0, "length": new.length, "d_Z": new.meta.get("d_Z")}}
    if args.csv:
        write_trajectory(new, args.csv)
        out["trajectory"] = args.csv
    _emit(out, args.out)
    return EXIT_OK


def cmd_witness_grow(args):
    g = _metric(args.metric)
    os.makedirs(args.out_dir, exist_ok=True)

    def progress(state):
        log.info("members %d/%d, candidates tried %d", len(state.family), 2 * args.m + 1,
                 state.candidates_tried)

    g2, family, cert, state = pipeline.grow_family(g, args.x, args.y, m=args.m, seed=args.seed,
                                                   progress=progress)
    cert_path = os.path.join(args.out_dir, "certificate.json")
    cert.to_json(cert_path)
    save_metric(g2, os.path.join(args.out_dir, "metric.json"))

    def export(k):
        rel = os.path.join("trajectories", f"geodesic_{k:03d}.csv")
        write_trajectory(family[k], os.path.join(args.out_dir, rel))
        return rel

    # paths relative to the output directory keep the manifest location-independent
    manifest = pipeline.run_manifest(state, args.seed, cert_path="certificate.json")
    manifest["jobs"] = args.jobs
    manifest["trajectories"] = _pmap(export, list(range(len(family))), args.jobs)
    _emit(manifest, os.path.join(args.out_dir, "manifest.json"))
    sys.stdout.write(dumps({"certificate": cert_path, "members": len(family), "hash": cert.hash}))
    return EXIT_OK


def cmd_certificate_verify(args):
    d = _load_json(args.certificate, "certificate")
    metric = _metric(args.metric) if args.metric else None
    try:
        res = blocking.verify_certificate(d, metric=metric, check_residual=not args.no_residual, jobs=args.jobs)
    except StaleMetric as e:
        _emit({"ok": False, "code": "stale-metric", "reasons": [str(e)]}, args.out)
        return EXIT_FAIL
    except KeyError as e:
        raise UsageError(f"certificate lacks field {e}") from None
    _emit({"ok": res.ok, "code": res.code, "reasons": res.reasons}, args.out)
    return EXIT_OK if res.ok else EXIT_FAIL


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="geoblock", description="Geodesics, blocking and insecurity witnesses "
                                "on Riemannian 2-tori.")
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--jobs", type=int, default=_jobs_default(),
                   help="worker threads (default $GEOBLOCK_JOBS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, xy=True):
        sp.add_argument("--metric", required=True, help="metric JSON file")
        if xy:
            sp.add_argument("--x", type=_point, required=True, help="start point a,b")
            sp.add_argument("--y", type=_point, required=True, help="end point a,b")
        sp.add_argument("--out", help="write the JSON result here instead of stdout")

    metric = sub.add_parser("metric", help="metric files").add_subparsers(dest="action", required=True)
    sp = metric.add_parser("validate", help="SPD and periodicity check on a grid")
    common(sp, xy=False)
    sp.add_argument("--grid", type=int, default=128)
    sp.set_defaults(func=cmd_metric_validate)

    geo = sub.add_parser("geodesic", help="single geodesics").add_subparsers(dest="action", required=True)
    sp = geo.add_parser("shoot", help="integrate one unit-speed geodesic")
    common(sp, xy=False)
    sp.add_argument("--x", type=_point, required=True)
    d = sp.add_mutually_exclusive_group(required=True)
    d.add_argument("--theta", type=float, help="chart angle of the initial direction")
    d.add_argument("--v", type=_point, help="initial direction a,b (normalized)")
    sp.add_argument("--length", type=_positive, required=True)
    sp.add_argument("--dt", type=_positive, default=gf.DT_SAMPLE)
    sp.add_argument("--csv", help="trajectory CSV path")
    sp.set_defaults(func=cmd_geodesic_shoot)

    sp = sub.add_parser("connect", help="all geodesics x -> y up to a length")
    common(sp)
    sp.add_argument("--lmax", type=_positive, required=True)
    sp.add_argument("--csv-dir", help="write one trajectory CSV per geodesic here")
    sp.set_defaults(func=cmd_connect)

    def family_args(sp):
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--lmax", type=_positive, help="use every connecting geodesic up to this length")
        src.add_argument("--family", help="JSON list of {theta0, length} (or a certificate/connect output)")

    blk = sub.add_parser("block", help="blocking sets").add_subparsers(dest="action", required=True)
    sp = blk.add_parser("check", help="does a finite point set block a family?")
    common(sp)
    family_args(sp)
    sp.add_argument("--points", type=_points, help="blocking points a,b;c,d (default: the four midpoints)")
    sp.add_argument("--eps", type=_positive, default=blocking.EPS_BLOCK)
    sp.set_defaults(func=cmd_block_check)

    sp = sub.add_parser("scheck", help="check the transversality conditions (i)-(iv) on a family")
    common(sp)
    family_args(sp)
    sp.add_argument("--conditions", default="i,ii,iii,iv")
    sp.set_defaults(func=cmd_scheck)

    sur = sub.add_parser("surgery", help="local metric perturbations").add_subparsers(dest="action",
                                                                                      required=True)
    sp = sur.add_parser("merge-foliations", help="blend two Fermi foliations")
    common(sp, xy=False)
    sp.add_argument("--f1", required=True, help="Fermi patch JSON (the incoming foliation)")
    sp.add_argument("--f2", required=True, help="Fermi patch JSON (the outgoing foliation)")
    sp.add_argument("--f0", help="Fermi patch JSON for the cut-off chart (default f1)")
    sp.add_argument("--budget", type=_disc, help="disc cx,cy,r that must hold the support")
    sp.add_argument("--check", action="store_true", help="also verify the merged geodesics numerically")
    sp.add_argument("--out-metric", required=True)
    sp.set_defaults(func=cmd_surgery_merge_foliations)

    sp = sur.add_parser("merge-geodesics", help="join one geodesic onto another inside a disc")
    common(sp, xy=False)
    sp.add_argument("--x1", type=_point, required=True)
    sp.add_argument("--theta1", type=float, required=True)
    sp.add_argument("--x2", type=_point, required=True)
    sp.add_argument("--theta2", type=float, required=True)
    sp.add_argument("--length", type=_positive, required=True)
    sp.add_argument("--u", type=_disc, required=True, help="disc cx,cy,r")
    sp.add_argument("--t0", type=float, required=True, help="parameter of the merge")
    sp.add_argument("--csv")
    sp.add_argument("--out-metric", required=True)
    sp.set_defaults(func=cmd_surgery_merge_geodesics)

    sp = sur.add_parser("deconjugate", help="remove conjugate pairs along a geodesic")
    common(sp, xy=False)
    sp.add_argument("--x", type=_point, required=True)
    sp.add_argument("--theta", type=float, required=True)
    sp.add_argument("--length", type=_positive, required=True)
    sp.add_argument("--marks", type=_floats, help="increasing mark times (default 0,length)")
    sp.add_argument("--s0", type=float, required=True)
    sp.add_argument("--u", type=_disc, required=True)
    sp.add_argument("--out-metric", required=True)
    sp.set_defaults(func=cmd_surgery_deconjugate)

    sp = sur.add_parser("avoid", help="reroute a geodesic around a finite set")
    common(sp, xy=False)
    sp.add_argument("--x", type=_point, required=True)
    sp.add_argument("--theta", type=float, required=True)
    sp.add_argument("--length", type=_positive, required=True)
    sp.add_argument("--z", type=_points, required=True, help="points to avoid a,b;c,d")
    sp.add_argument("--s0", type=float, required=True)
    sp.add_argument("--u", type=_disc, required=True)
    sp.add_argument("--w1", type=_point, required=True, help="new start direction")
    sp.add_argument("--w2", type=_point, required=True, help="new end direction")
    sp.add_argument("--eps", type=_positive, default=1e-5)
    sp.add_argument("--csv")
    sp.add_argument("--out-metric", required=True)
    sp.set_defaults(func=cmd_surgery_avoid)

    wit = sub.add_parser("witness", help="insecurity witnesses").add_subparsers(dest="action", required=True)
    sp = wit.add_parser("grow", help="grow 2m+1 geodesics and write a certificate")
    sp.add_argument("--metric", required=True)
    sp.add_argument("--x", type=_point, required=True)
    sp.add_argument("--y", type=_point, required=True)
    sp.add_argument("--m", type=int, required=True)
    sp.add_argument("--out-dir", default="witness")
    sp.set_defaults(func=cmd_witness_grow)

    cer = sub.add_parser("certificate", help="certificates").add_subparsers(dest="action", required=True)
    sp = cer.add_parser("verify", help="re-check a certificate from scratch")
    sp.add_argument("certificate")
    sp.add_argument("--metric", help="require the certificate to name this metric")
    sp.add_argument("--no-residual", action="store_true", help="skip the fine residual pass")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_certificate_verify)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        sys.stderr.write("geoblock: --jobs must be >= 1\n")
        return EXIT_USAGE
    if getattr(args, "m", 0) is not None and getattr(args, "m", 0) < 0:
        sys.stderr.write("geoblock: --m must be >= 0\n")
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        sys.stderr.write(f"geoblock: {e}\n")
        return EXIT_USAGE
    except GeoblockError as e:
        sys.stderr.write(f"geoblock: {type(e).__name__}: {e}\n")
        return EXIT_FAIL
    except ValueError as e:
        sys.stderr.write(f"geoblock: {e}\n")
        return EXIT_USAGE


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
