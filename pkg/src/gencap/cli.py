"""Command-line front door: gen, infer, learn, eval, bench, render.

All randomness flows from an explicit ``--seed`` (falling back to the
``GENCAP_SEED`` environment variable), so every artifact is reproducible.
The ``bench`` subcommand reruns the full constellation evaluation and writes
a CSV with one row per (method, sigma, metric) cell.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .core_model import (
    ModelConfig,
    Pose,
    Scene,
    TemplateSet,
    load_scenes,
    load_templates,
    save_scenes,
    save_templates,
    transform_template,
)
from .eval_metrics import (
    adjusted_rand_index,
    predicted_partition,
    scene_accuracy,
    segmentation_accuracy,
    truth_partition,
    variation_of_information,
)
from .ransac_engine import combine_explanations, ransac_scene
from .scene_gen import (
    GeneratorConfig,
    generate_dataset,
    generate_single_object_scenes,
    standard_constellation_set,
)
from .template_learning import (
    LearningConfig,
    learn_template,
    normalize_template,
    procrustes_align,
    smse,
    template_from_parts,
)
from .vi_engine import run_inference

SEED_ENV = "GENCAP_SEED"
METHODS = ("gcm-ds", "gcm-gmm", "ransac")
METRICS = ("sa", "ari", "vi", "scene_acc")
SIGMAS = (0.0, 0.1, 0.25)


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


def _fmt(x: float) -> str:
    """Deterministic float formatting for CSV output."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# Inference dispatch shared by `infer` and `bench`


def infer_scene(
    scene: Scene,
    templates: TemplateSet,
    method: str,
    config: ModelConfig,
    tol: float,
    seed: int,
) -> dict:
    """Run one method on one scene; returns a JSON-ready record."""
    if method == "ransac":
        labels, poses = combine_explanations(ransac_scene(scene, templates, tol), scene, templates)
        return {
            "method": method,
            "labels": list(labels),
            "poses": {str(k): p.as_vector().tolist() for k, p in poses.items()},
            "converged": True,
        }
    if method not in ("gcm-ds", "gcm-gmm"):
        raise ValueError(f"unknown method {method!r}")
    variant = "ds" if method == "gcm-ds" else "gmm"
    res = run_inference(scene, templates, config, variant=variant, seed=seed)
    return {
        "method": method,
        "labels": list(res.labels),
        "poses": {str(k): p.as_vector().tolist() for k, p in res.poses.items()},
        "R": res.R.tolist(),
        "mu": [m.tolist() for m in res.posterior.means],
        "Lambda": [p.tolist() for p in res.posterior.precisions],
        "elbo": res.elbo,
        "elbo_trace": res.trace.tolist(),
        "converged": bool(res.converged),
    }


def score_scene(scene: Scene, record: dict, templates: TemplateSet) -> dict:
    truth = truth_partition(scene, templates)
    pred = predicted_partition(record["labels"], templates)
    return {
        "sa": segmentation_accuracy(truth, pred),
        "ari": adjusted_rand_index(truth, pred),
        "vi": variation_of_information(truth, pred),
        "scene_acc": float(scene_accuracy(truth, pred)),
    }


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    templates = standard_constellation_set()
    config = GeneratorConfig(
        templates=templates,
        sigma=args.sigma,
        presence_prob=args.presence_prob,
        draws=args.draws,
        seed=args.seed,
        normalize=not args.no_normalize,
    )
    scenes = generate_dataset(config)
    save_scenes(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_infer(args) -> int:
    templates = (
        load_templates(args.templates) if args.templates else standard_constellation_set()
    )
    scenes = load_scenes(args.scenes)
    config = ModelConfig(beta_init=args.beta_init, restarts=args.restarts)
    records = []
    unconverged = 0
    for i, scene in enumerate(scenes):
        rec = infer_scene(scene, templates, args.method, config, args.tol, seed=args.seed + i)
        if not rec["converged"]:
            unconverged += 1
        records.append(rec)
    with open(args.out, "w") as fh:
        json.dump({"method": args.method, "seed": args.seed, "scenes": records}, fh)
    print(f"wrote {len(records)} results to {args.out} ({unconverged} unconverged)")
    if args.strict and unconverged:
        return 1
    return 0


def cmd_learn(args) -> int:
    templates = standard_constellation_set()
    names = [t.id for t in templates]
    if args.cls not in names:
        raise SystemExit(f"unknown class {args.cls!r}; choose from {names}")
    target = templates.templates[names.index(args.cls)]
    rng = np.random.default_rng(args.seed)
    if args.scenes:
        scenes = load_scenes(args.scenes)
    else:
        scenes = generate_single_object_scenes(target, args.count, rng, sigma=args.sigma)
    config = LearningConfig(n_scenes=args.count)
    parts, trace = learn_template(scenes, config, rng=rng)
    learned = template_from_parts(f"learned-{args.cls}", parts)
    save_templates(TemplateSet((learned,)), args.out)
    ref = normalize_template(target.part_locations())
    err = smse(procrustes_align(parts, ref), ref)
    if args.report:
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "beta", "step_smse"])
            for i, (b, s) in enumerate(zip(trace.betas, trace.smse_steps)):
                w.writerow([i, _fmt(b), _fmt(s)])
    print(
        f"learned {args.cls} in {trace.iterations} iterations "
        f"(converged={trace.converged}), smse vs reference {err:.3e}"
    )
    if args.strict and not trace.converged:
        return 1
    return 0


def _per_scene_metrics(pred_path: str, truth_path: str, templates: TemplateSet):
    scenes = load_scenes(truth_path)
    with open(pred_path) as fh:
        payload = json.load(fh)
    records = payload["scenes"]
    if len(records) != len(scenes):
        raise SystemExit("prediction and truth files disagree on scene count")
    return [score_scene(s, r, templates) for s, r in zip(scenes, records)]


def cmd_eval(args) -> int:
    templates = standard_constellation_set()
    rows = _per_scene_metrics(args.pred, args.truth, templates)
    if args.compare:
        from scipy.stats import ttest_rel

        other = _per_scene_metrics(args.compare, args.truth, templates)
        print("paired t-test (pred vs compare):")
        for metric in METRICS:
            a = np.array([r[metric] for r in rows])
            b = np.array([r[metric] for r in other])
            if np.allclose(a, b):
                print(f"  {metric}: identical samples")
                continue
            stat = ttest_rel(a, b)
            print(
                f"  {metric}: mean {a.mean():.4f} vs {b.mean():.4f}, "
                f"t={stat.statistic:.3f}, p={stat.pvalue:.2e}"
            )
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene", "metric", "value"])
            for i, row in enumerate(rows):
                for metric in METRICS:
                    w.writerow([i, metric, _fmt(row[metric])])
            for metric in METRICS:
                vals = np.array([r[metric] for r in rows])
                w.writerow(
                    ["aggregate", metric, _fmt(vals.mean()), _fmt(vals.std()), len(vals)]
                )
    for metric in METRICS:
        vals = np.array([r[metric] for r in rows])
        print(f"{metric}: {vals.mean():.4f} +- {vals.std():.4f} (n={len(vals)})")
    return 0


def run_benchmark(
    methods: Sequence[str],
    sigmas: Sequence[float],
    seed: int,
    beta_init: float = 0.05,
    restarts: int = 5,
    draws: int = 512,
    tol: float = 0.1,
    timing: bool = True,
) -> list[dict]:
    """The full evaluation grid; one dict per (method, sigma, metric) cell."""
    templates = standard_constellation_set()
    config = ModelConfig(beta_init=beta_init, restarts=restarts)
    rows = []
    for sigma in sigmas:
        scenes = generate_dataset(
            GeneratorConfig(templates=templates, sigma=sigma, draws=draws, seed=seed)
        )
        for method in methods:
            t0 = time.perf_counter()
            scores = [
                score_scene(s, infer_scene(s, templates, method, config, tol, seed + i), templates)
                for i, s in enumerate(scenes)
            ]
            seconds = time.perf_counter() - t0 if timing else 0.0
            for metric in METRICS:
                vals = np.array([sc[metric] for sc in scores])
                rows.append(
                    {
                        "method": method,
                        "sigma": sigma,
                        "metric": metric,
                        "mean": float(vals.mean()),
                        "std": float(vals.std()),
                        "n": len(vals),
                        "seconds": seconds,
                    }
                )
    return rows


def bench_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method", "sigma", "metric", "mean", "std", "n", "seconds"])
    for r in rows:
        w.writerow(
            [
                r["method"],
                _fmt(r["sigma"]),
                r["metric"],
                _fmt(r["mean"]),
                _fmt(r["std"]),
                r["n"],
                _fmt(r["seconds"]),
            ]
        )
    return buf.getvalue()


def cmd_bench(args) -> int:
    methods = args.methods.split(",")
    for m in methods:
        if m not in METHODS:
            raise SystemExit(f"unknown method {m!r}; choose from {METHODS}")
    sigmas = [float(s) for s in args.sigmas.split(",")]
    rows = run_benchmark(
        methods,
        sigmas,
        args.seed,
        beta_init=args.beta_init,
        restarts=args.restarts,
        draws=args.draws,
        timing=not args.no_timing,
    )
    text = bench_csv(rows)
    with open(args.out, "w", newline="") as fh:
        fh.write(text)
    # human-readable table
    print(f"{'method':>8} {'sigma':>6} " + " ".join(f"{m:>14}" for m in METRICS))
    for method in methods:
        for sigma in sigmas:
            cells = {r["metric"]: r for r in rows if r["method"] == method and r["sigma"] == sigma}
            line = " ".join(
                f"{cells[m]['mean']:.3f} ± {cells[m]['std']:.3f}" for m in METRICS
            )
            print(f"{method:>8} {sigma:>6.2f} {line}")
    return 0


# ---------------------------------------------------------------------------
# SVG rendering

_PALETTE = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
_UNCOLORED = "#555555"


def render_svg(
    scene: Scene,
    templates: TemplateSet,
    labels: Optional[Sequence[int]] = None,
    poses: Optional[dict] = None,
    size: int = 360,
) -> str:
    """Scatter of scene points, colored by predicted object, with template overlays."""
    half = max(1.0, float(np.max(np.abs(scene.points)))) * 1.15

    def to_px(p):
        return (
            size / 2 + p[0] * size / (2 * half),
            size / 2 - p[1] * size / (2 * half),
        )

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if poses:
        for k, pose in sorted(poses.items()):
            color = _PALETTE[int(k) % len(_PALETTE)]
            verts = [to_px(v) for v in transform_template(templates.templates[int(k)], pose)]
            pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in verts)
            out.append(
                f'<polygon points="{pts}" fill="none" stroke="{color}" '
                f'stroke-width="1.5" stroke-dasharray="4 3"/>'
            )
            for x, y in verts:
                out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="none" stroke="{color}"/>')
    for m, p in enumerate(scene.points):
        if labels is None or labels[m] < 0:
            color = _UNCOLORED
        else:
            color = _PALETTE[int(labels[m]) % len(_PALETTE)]
        x, y = to_px(p)
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="{color}"/>')
    if poses:
        y0 = 16
        for k, pose in sorted(poses.items()):
            color = _PALETTE[int(k) % len(_PALETTE)]
            name = escape(templates.templates[int(k)].id)
            vec = ", ".join(f"{v:.2f}" for v in pose.as_vector())
            out.append(
                f'<text x="8" y="{y0}" font-size="11" fill="{color}">{name}: [{vec}]</text>'
            )
            y0 += 14
    out.append("</svg>")
    return "\n".join(out)


def cmd_render(args) -> int:
    templates = standard_constellation_set()
    scenes = load_scenes(args.scenes)
    scene = scenes[args.index]
    labels = poses = None
    if args.pred:
        with open(args.pred) as fh:
            rec = json.load(fh)["scenes"][args.index]
        labels = rec["labels"]
        poses = {int(k): Pose.from_vector(np.array(v)) for k, v in rec["poses"].items()}
    with open(args.out, "w") as fh:
        fh.write(render_svg(scene, templates, labels, poses))
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gencap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a benchmark scene dataset")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--draws", type=int, default=512)
    p.add_argument("--presence-prob", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("infer", help="run inference on a scene dataset")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--templates", help="template JSON (default: standard constellation set)")
    p.add_argument("--beta-init", type=float, default=0.05)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--tol", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("learn", help="learn a template from single-object scenes")
    p.add_argument("--scenes", help="training scenes JSON (default: generate)")
    p.add_argument("--class", dest="cls", required=True)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="per-iteration convergence CSV")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--compare", help="second results file for a paired t-test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="full benchmark grid, CSV report")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--sigmas", default=",".join(str(s) for s in SIGMAS))
    p.add_argument("--draws", type=int, default=512)
    p.add_argument("--beta-init", type=float, default=0.05)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--no-timing", action="store_true", help="write 0.0 seconds for reproducible bytes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", help="render a scene (and optional result) to SVG")
    p.add_argument("--scenes", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--pred")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
