"""Command-line interface: template, synth, fit, eval, export."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import io as jio
from .fit import FitConfig, fit
from .metrics import DEFAULT_SAMPLES, evaluate_mesh, evaluate_volume
from .template import PRESETS, TemplateSpec, build_template
from .volume import PHANTOM_TEMPLATES, make_phantom, template_volume


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_template(args) -> int:
    if args.organ in PRESETS:
        organ = args.organ
    else:
        organ = jio.read_template_spec(args.organ)
    mesh, spec = build_template(organ, args.levels)
    jio.write_mesh(args.output, mesh, spec)
    print(
        f"{spec.name}: {spec.component_count} components, {len(spec.supervised_regions())} supervised regions, "
        f"{mesh.n_vertices} vertices, {mesh.n_faces} triangles -> {args.output}"
    )
    return 0


def cmd_synth(args) -> int:
    if args.kind == "template":
        if not args.template:
            raise ValueError("synth template needs --template MESH")
        if args.truth:
            raise ValueError("--truth only applies to analytic phantoms")
        mesh, spec = jio.read_mesh(args.template)
        if spec is None:
            raise ValueError(f"{args.template} carries no template description")
        volume = template_volume(mesh, spec, args.dims)
        jio.write_volume(args.output, volume)
        print(f"template {spec.name}: dims {volume.dims}, classes {volume.class_table} -> {args.output}")
        return 0
    volume, truth = make_phantom(args.kind, args.dims, args.seed)
    jio.write_volume(args.output, volume)
    if args.truth:
        _write_json(
            args.truth,
            {
                "kind": args.kind,
                "seed": args.seed,
                "names": list(truth.names),
                "centers": truth.centers.tolist(),
                "radii": truth.radii.tolist(),
                "linear": truth.linear.tolist(),
                "quadratic": truth.quadratic.tolist(),
            },
        )
    print(f"{args.kind}: dims {volume.dims}, classes {volume.class_table} -> {args.output}")
    return 0


def cmd_fit(args) -> int:
    mesh, spec = jio.read_mesh(args.template)
    if spec is None:
        raise ValueError(f"{args.template} carries no template description")
    volume = jio.read_volume(args.volume)
    config = jio.read_config(args.config) if args.config else FitConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    log = None if args.quiet else print
    out, report = fit(mesh, spec, volume, config, log=log)
    jio.write_mesh(args.output, out, spec)
    if args.report:
        _write_json(args.report, report.to_dict())
    print(f"fit done: stage-averaged total {report.total:.6g} -> {args.output}")
    return 0


def cmd_eval(args) -> int:
    gt = jio.read_volume(args.gt)
    pred_bytes = Path(args.pred).read_bytes()
    if pred_bytes.startswith(jio.VOLUME_MAGIC):
        if not args.template:
            raise ValueError("evaluating a label volume needs --template to name the regions")
        spec = _spec_for(args.template)
        report = evaluate_volume(jio.volume_from_bytes(pred_bytes), gt, spec, args.samples, args.seed)
    else:
        mesh, spec = jio.mesh_from_bytes(pred_bytes)
        if spec is None:
            raise ValueError(f"{args.pred} carries no template description")
        report = evaluate_mesh(mesh, spec, gt, args.samples, args.seed, args.resolution)
    out = Path(args.output)
    out.write_text(report.to_text())
    _write_json(out.with_suffix(".json"), report.to_dict())
    for region, metric, value in report.rows():
        print(f"{region}\t{metric}\t{value}")
    return 0


def _spec_for(arg) -> TemplateSpec:
    if arg in PRESETS:
        return PRESETS[arg]()
    return jio.read_template_spec(arg)


def cmd_export(args) -> int:
    mesh, spec = jio.read_mesh(args.mesh)
    paths = jio.export_obj(mesh, spec, args.output)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointmesh", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("template", help="build a preset or custom template")
    t.add_argument("organ", help=f"one of {sorted(PRESETS)} or a JSON template description")
    t.add_argument("-o", "--output", required=True)
    t.add_argument("--levels", type=int, default=None, help="subdivision levels (default from the template)")
    t.set_defaults(func=cmd_template)

    s = sub.add_parser("synth", help="generate a synthetic labeled volume")
    s.add_argument("kind", choices=sorted(PHANTOM_TEMPLATES) + ["template"], help="phantom kind, or 'template' to voxelize --template")
    s.add_argument("--template", help="mesh file to voxelize when kind is 'template'")
    s.add_argument("--dims", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--truth", help="also write the analytic description as JSON")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="fit a template mesh to a labeled volume")
    f.add_argument("--template", required=True)
    f.add_argument("--volume", required=True)
    f.add_argument("--config")
    f.add_argument("--seed", type=int, default=None, help="override the config seed")
    f.add_argument("-o", "--output", required=True)
    f.add_argument("--report")
    f.add_argument("--quiet", action="store_true")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="evaluate a mesh (or label volume) against a labeled volume")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--template", help="region names for label-volume predictions")
    e.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--resolution", type=int, default=256, help="grid size for the overlap volume")
    e.add_argument("-o", "--output", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="write OBJ files per component and per interface")
    x.add_argument("--mesh", required=True)
    x.add_argument("-o", "--output", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
