"""Command-line interface and reproducible pipeline runner.

Subcommands mirror the library stages: init, fit, subdivide, laplace,
eigen, wks, geodesic, match, export, pipeline. Every subcommand accepts
``--config out.json`` to dump its fully resolved parameters as canonical
JSON. ``pipeline`` executes a JSON-described stage list into a timestamped
run directory with a manifest (inputs, outputs, hashes, timings) and
content-hash caching, so re-runs only execute stages whose inputs changed.
"""

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import SubdivFitError

_THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_cap():
    cap = os.environ.get("SUBDIVFIT_THREADS", "")
    if cap and cap != "0":
        for name in _THREAD_ENV:
            os.environ.setdefault(name, cap)


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _dump_config(params, command, path):
    if not path:
        return
    payload = {"command": command, "params": params, "version": __version__}
    with open(path, "w") as fh:
        fh.write(_canonical_json(payload))
        fh.write("\n")


# ---------------------------------------------------------------------------
# stage implementations: plain dict params -> files on disk

def _load_quad(path):
    from .mesh import QuadControlMesh
    from .meshio import load_mesh

    mesh = load_mesh(path)
    if not isinstance(mesh, QuadControlMesh):
        raise SubdivFitError(f"{path}: expected a quad control mesh")
    return mesh


def run_init(params):
    from .meshio import load_mesh, save_mesh
    from .mesh import TriMesh
    from .quadify import tri_to_quad
    from .simplify import qem_collapse

    mesh = load_mesh(params["input"])
    if not isinstance(mesh, TriMesh):
        raise SubdivFitError(f"{params['input']}: init expects a triangle mesh")
    collapsed = qem_collapse(mesh, int(params["target_vertices"]))
    result = tri_to_quad(collapsed)
    save_mesh(result.mesh, params["output"])
    if params.get("report_cost"):
        print(f"pairs={result.matched_pairs} unmatched={result.unmatched_triangles} "
              f"split={result.split_applied} total_cost={result.total_cost:.6g}")
    return {"control_vertices": result.mesh.n_vertices}


def run_fit(params):
    from .fitting import FitConfig, fit
    from .meshio import load_point_cloud, save_mesh

    init_mesh = _load_quad(params["init"])
    cloud = load_point_cloud(params["cloud"])
    config = FitConfig(
        q=float(params["q"]),
        alpha=float(params["alpha"]),
        beta=float(params["beta"]),
        samples_per_face=int(params["samples_per_face"]),
        cg_tol=float(params["cg_tol"]),
        outer_max_iter=int(params["max_iter"]),
        energy_decrease_tol=float(params["energy_decrease_tol"]),
    )
    result = fit(cloud, init_mesh, config)
    save_mesh(result.mesh, params["out"])
    if params.get("energy_log"):
        with open(params["energy_log"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "E_point", "E_tangent", "E_reg", "E_total"])
            for row in result.energy_log_rows():
                writer.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
    return {"iterations": len(result.history), "stop": result.stop_reason,
            "best_iteration": result.best_iteration}


def run_subdivide(params):
    from .meshio import save_mesh
    from .subdivision import cc_subdivide, composed_subdivision_matrix

    mesh = _load_quad(params["input"])
    levels = int(params["levels"])
    if params.get("matrix_out"):
        import scipy.io

        scipy.io.mmwrite(params["matrix_out"],
                         composed_subdivision_matrix(mesh, levels))
    current = mesh
    for _ in range(levels):
        current, _ = cc_subdivide(current)
    save_mesh(current, params["output"])
    return {"vertices": current.n_vertices}


def run_laplace(params):
    import scipy.io

    from .fem import assemble

    mesh = _load_quad(params["input"])
    ops = assemble(mesh, int(params["quadrature"]))
    if params.get("out_d0"):
        scipy.io.mmwrite(params["out_d0"], ops.mass)
    if params.get("out_d1"):
        scipy.io.mmwrite(params["out_d1"], ops.stiffness)
    return {"area": ops.area}


def run_eigen(params):
    from .fem import assemble, eigensolve

    mesh = _load_quad(params["input"])
    ops = assemble(mesh, int(params["quadrature"]))
    basis = eigensolve(ops, int(params["k"]), tol=float(params["tol"]))
    out_values = params.get("out_values")
    if out_values:
        with open(out_values, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "eigenvalue"])
            for i, lam in enumerate(basis.eigenvalues):
                writer.writerow([i, repr(float(lam))])
    base = params.get("out_vectors")
    if base:
        vectors = np.ascontiguousarray(basis.eigenvectors, dtype="<f8")
        with open(base + ".json", "w") as fh:
            fh.write(_canonical_json({
                "n": int(vectors.shape[0]), "k": int(vectors.shape[1]),
                "ordering": "vertex_major", "dtype": "float64",
            }))
            fh.write("\n")
        with open(base + ".bin", "wb") as fh:
            fh.write(vectors.tobytes())
    return {"eigenvalues": [float(x) for x in basis.eigenvalues]}


def _basis_for(path, k, quadrature):
    from .fem import assemble, eigensolve

    mesh = _load_quad(path)
    ops = assemble(mesh, quadrature)
    return mesh, ops, eigensolve(ops, k)


def run_wks(params):
    from .analysis import wks

    _, _, basis = _basis_for(params["input"], int(params["k"]),
                             int(params["quadrature"]))
    desc = wks(basis, levels=int(params["levels"]),
               sigma_factor=float(params["sigma_factor"]))
    with open(params["out"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vertex"] + [repr(float(e)) for e in desc.energies])
        for i, row in enumerate(desc.values):
            writer.writerow([i] + [repr(float(x)) for x in row])
    return {"levels": int(params["levels"])}


def run_geodesic(params):
    from .analysis import heat_geodesic
    from .fem import assemble
    from .meshio import save_mesh_with_fields
    from .subdivision import refine_for_visualization

    mesh = _load_quad(params["input"])
    ops = assemble(mesh, int(params["quadrature"]))
    field = heat_geodesic(mesh, ops, int(params["source"]),
                          m_factor=float(params["m_factor"]))
    refine = int(params.get("refine", 0))
    out_mesh, out_field = refine_for_visualization(mesh, field.coefficients, refine)
    save_mesh_with_fields(out_mesh, {"geodesic": out_field}, params["out"],
                          levelline=params.get("levelline"))
    return {"time": field.time, "degenerate_nodes": field.degenerate_nodes}


def run_match(params):
    import scipy.io

    from .analysis import functional_map, point_map, wks

    k = int(params["k"])
    quadrature = int(params["quadrature"])
    n_eigs = max(k + 1, int(params.get("eigenpairs", k + 6)))
    _, _, basis_a = _basis_for(params["shape_a"], n_eigs, quadrature)
    _, _, basis_b = _basis_for(params["shape_b"], n_eigs, quadrature)
    desc_a = wks(basis_a, levels=int(params["levels"]),
                 sigma_factor=float(params["sigma_factor"]))
    desc_b = wks(basis_b, levels=int(params["levels"]),
                 sigma_factor=float(params["sigma_factor"]))
    fmap = functional_map(basis_a, basis_b, desc_a.values, desc_b.values,
                          k=k, mu=float(params["mu"]))
    if params.get("out_map"):
        scipy.io.mmwrite(params["out_map"], fmap.matrix)
    correspondence = point_map(fmap, basis_a, basis_b)
    with open(params["out_corr"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["a_index", "b_index"])
        for a, b in enumerate(correspondence):
            writer.writerow([a, int(b)])
    return {"residual": fmap.residual}


def run_export(params):
    from .meshio import load_mesh_with_fields, save_mesh_with_fields

    mesh, fields = load_mesh_with_fields(params["input"])
    save_mesh_with_fields(mesh, fields, params["output"],
                          levelline=params.get("levelline"))
    return {"fields": sorted(fields)}


_STAGE_RUNNERS = {
    "init": run_init,
    "fit": run_fit,
    "subdivide": run_subdivide,
    "laplace": run_laplace,
    "eigen": run_eigen,
    "wks": run_wks,
    "geodesic": run_geodesic,
    "match": run_match,
    "export": run_export,
}

_STAGE_INPUT_KEYS = {
    "init": ("input",),
    "fit": ("init", "cloud"),
    "subdivide": ("input",),
    "laplace": ("input",),
    "eigen": ("input",),
    "wks": ("input",),
    "geodesic": ("input",),
    "match": ("shape_a", "shape_b"),
    "export": ("input",),
}

_STAGE_OUTPUT_KEYS = {
    "init": ("output",),
    "fit": ("out", "energy_log"),
    "subdivide": ("output", "matrix_out"),
    "laplace": ("out_d0", "out_d1"),
    "eigen": ("out_values", "out_vectors"),
    "wks": ("out",),
    "geodesic": ("out",),
    "match": ("out_map", "out_corr"),
    "export": ("output",),
}

_STAGE_REQUIRED = {
    "init": ("input", "output", "target_vertices"),
    "fit": ("init", "cloud", "out", "q", "alpha", "beta"),
    "subdivide": ("input", "output"),
    "laplace": ("input",),
    "eigen": ("input", "k"),
    "wks": ("input", "k", "out"),
    "geodesic": ("input", "source", "out"),
    "match": ("shape_a", "shape_b", "k", "out_corr"),
    "export": ("input", "output"),
}

_PIPELINE_SCHEMA = {
    "type": "object",
    "required": ["stages"],
    "additionalProperties": False,
    "properties": {
        "run_root": {"type": "string"},
        "stages": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "command", "params"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "command": {"enum": sorted(_STAGE_RUNNERS)},
                    "params": {"type": "object"},
                },
            },
        },
    },
}


def _stage_output_paths(command, params):
    out = {}
    for key in _STAGE_OUTPUT_KEYS[command]:
        value = params.get(key)
        if value:
            out[key] = value
    return out


def _eigenvector_sidecars(command, params, paths):
    # run_eigen's out_vectors is a path stem producing .json/.bin
    files = []
    for key, value in paths.items():
        if command == "eigen" and key == "out_vectors":
            files.extend([value + ".json", value + ".bin"])
        else:
            files.append(value)
    return files


def run_pipeline(config_path, run_root=None):
    import jsonschema

    with open(config_path) as fh:
        config = json.load(fh)
    try:
        jsonschema.validate(config, _PIPELINE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SubdivFitError(f"pipeline config invalid: {exc.message} "
                             f"at {'/'.join(str(p) for p in exc.absolute_path)}") from exc

    root = Path(run_root or config.get("run_root", "runs"))
    run_dir = root / time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    suffix = 0
    while run_dir.exists():
        suffix += 1
        run_dir = root / (time.strftime("%Y%m%dT%H%M%S", time.gmtime()) + f"-{suffix}")
    run_dir.mkdir(parents=True)
    cache_root = root / "cache"
    cache_root.mkdir(parents=True, exist_ok=True)

    manifest = {"config": config, "stages": [], "status": "running"}
    manifest_path = run_dir / "manifest.json"

    def flush():
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    try:
        for stage in config["stages"]:
            name, command = stage["name"], stage["command"]
            params = dict(_STAGE_DEFAULTS.get(command, {}))
            params.update(stage["params"])
            missing = [key for key in _STAGE_REQUIRED[command] if key not in params]
            if missing:
                raise SubdivFitError(
                    f"stage {name!r}: missing required field(s) {missing}")
            record = {"name": name, "command": command, "params": params}
            started = time.time()

            inputs = {}
            for key in _STAGE_INPUT_KEYS[command]:
                path = params.get(key)
                if not path:
                    raise SubdivFitError(
                        f"stage {name!r}: missing required input field {key!r}")
                if not Path(path).exists():
                    raise SubdivFitError(
                        f"stage {name!r}: input field {key!r} points to missing "
                        f"file {path!r}")
                inputs[key] = {"path": path, "sha256": _sha256_file(path)}

            hashed = {k: v for k, v in params.items()
                      if k not in _STAGE_OUTPUT_KEYS[command]}
            stage_hash = hashlib.sha256(_canonical_json({
                "command": command, "params": hashed,
                "inputs": {k: v["sha256"] for k, v in inputs.items()},
            }).encode()).hexdigest()
            record["stage_hash"] = stage_hash
            record["inputs"] = inputs

            out_paths = _stage_output_paths(command, params)
            out_files = _eigenvector_sidecars(command, params, out_paths)
            cache_dir = cache_root / stage_hash
            if cache_dir.exists():
                for fname in out_files:
                    src = cache_dir / Path(fname).name
                    Path(fname).parent.mkdir(parents=True, exist_ok=True)
                    shutil.copyfile(src, fname)
                record["cached"] = True
                record["info"] = None
            else:
                for fname in out_files:
                    Path(fname).parent.mkdir(parents=True, exist_ok=True)
                record["info"] = _STAGE_RUNNERS[command](params)
                record["cached"] = False
                staging = cache_root / (stage_hash + ".tmp")
                if staging.exists():
                    shutil.rmtree(staging)
                staging.mkdir()
                for fname in out_files:
                    shutil.copyfile(fname, staging / Path(fname).name)
                staging.rename(cache_dir)

            record["outputs"] = {
                Path(f).name: {"path": f, "sha256": _sha256_file(f)}
                for f in out_files
            }
            record["seconds"] = round(time.time() - started, 6)
            manifest["stages"].append(record)
            flush()
        manifest["status"] = "completed"
    except Exception as exc:
        manifest["status"] = f"failed: {exc}"
        flush()
        raise
    flush()
    return run_dir


# ---------------------------------------------------------------------------
# argument parsing

_STAGE_DEFAULTS = {
    "init": {"report_cost": False},
    "fit": {"q": 1.3, "samples_per_face": 4, "cg_tol": 1e-8, "max_iter": 50,
            "energy_decrease_tol": 1e-4, "energy_log": None},
    "subdivide": {"levels": 1, "matrix_out": None},
    "laplace": {"quadrature": 3, "out_d0": None, "out_d1": None},
    "eigen": {"quadrature": 3, "tol": 1e-8, "out_values": None, "out_vectors": None},
    "wks": {"quadrature": 3, "levels": 100, "sigma_factor": 2.0},
    "geodesic": {"quadrature": 3, "m_factor": 1.0, "levelline": None, "refine": 0},
    "match": {"quadrature": 3, "levels": 20, "sigma_factor": 2.0, "mu": 0.0,
              "out_map": None},
    "export": {"levelline": None},
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="subdivfit",
        description="Subdivision-surface compression and smooth shape analysis",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="OUT.json", default=None,
                       help="dump the resolved run configuration to this file")
        return p

    p = add("init", "collapse a triangle mesh and pair triangles into a quad control mesh")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--target-vertices", type=int, required=True)
    p.add_argument("--report-cost", action="store_true")

    p = add("fit", "fit a subdivision surface to a point cloud")
    p.add_argument("--q", type=float, default=1.3)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--samples-per-face", type=int, default=4)
    p.add_argument("--cg-tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--energy-decrease-tol", type=float, default=1e-4)
    p.add_argument("--init", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--energy-log", default=None)

    p = add("subdivide", "apply Catmull-Clark steps")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--matrix-out", default=None,
                   help="write the composed subdivision matrix (Matrix Market)")

    p = add("laplace", "assemble mass and stiffness matrices")
    p.add_argument("input")
    p.add_argument("--quadrature", type=int, default=3)
    p.add_argument("--out-d0", default=None)
    p.add_argument("--out-d1", default=None)

    p = add("eigen", "generalized Laplace-Beltrami eigenpairs")
    p.add_argument("input")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--quadrature", type=int, default=3)
    p.add_argument("--out-values", default=None)
    p.add_argument("--out-vectors", default=None,
                   help="path stem; writes <stem>.json and <stem>.bin")

    p = add("wks", "wave-kernel signatures per control vertex")
    p.add_argument("input")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--levels", type=int, default=100)
    p.add_argument("--sigma-factor", type=float, default=2.0)
    p.add_argument("--quadrature", type=int, default=3)
    p.add_argument("--out", required=True)

    p = add("geodesic", "heat-method geodesic field from a source vertex")
    p.add_argument("input")
    p.add_argument("--source", type=int, required=True)
    p.add_argument("--m-factor", type=float, default=1.0)
    p.add_argument("--quadrature", type=int, default=3)
    p.add_argument("--refine", type=int, default=0,
                   help="visualization subdivision level for the export")
    p.add_argument("--levelline", type=float, default=None,
                   help="also export cos(levelline * field)")
    p.add_argument("--out", required=True)

    p = add("match", "functional-map matching between two control meshes")
    p.add_argument("--shape-a", required=True)
    p.add_argument("--shape-b", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--levels", type=int, default=20)
    p.add_argument("--sigma-factor", type=float, default=2.0)
    p.add_argument("--quadrature", type=int, default=3)
    p.add_argument("--out-map", default=None)
    p.add_argument("--out-corr", required=True)

    p = add("export", "convert mesh formats, carrying scalar fields")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--levelline", type=float, default=None)

    p = add("pipeline", "run a multi-stage JSON pipeline with caching")
    p.add_argument("config_file")
    p.add_argument("--run-root", default=None)

    return parser


def _params_from_args(args):
    skip = {"command", "config"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    args = parser.parse_args(argv)
    command = args.command
    try:
        if command == "pipeline":
            run_dir = run_pipeline(args.config_file, args.run_root)
            print(f"run directory: {run_dir}")
            return 0
        params = _params_from_args(args)
        _dump_config(params, command, args.config)
        info = _STAGE_RUNNERS[command](params)
        if info:
            print(_canonical_json(info))
        return 0
    except SubdivFitError as exc:
        print(f"subdivfit: {command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"subdivfit: {command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
