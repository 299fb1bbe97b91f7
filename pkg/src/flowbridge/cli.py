"""``flowbridge`` command line: gen-data, train, align, finetune, sample, eval.

Every command reads a JSON config; outputs are JSONL/JSON/CSV. Exit codes:
0 success, 2 config or schema problem, 3 numerical divergence, 4 checkpoint
mismatch.
"""

from __future__ import annotations

import os

_threads = os.environ.get("FLOWBRIDGE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import warnings  # noqa: E402

import numpy as np  # noqa: E402

from . import alignment, evaluation, toydata  # noqa: E402
from .backbone import (Checkpoint, FlowSettings, ModelConfig, BackboneModel, Priors,  # noqa: E402
                       TrainConfig, TrainState, generate, load_checkpoint, marginal_priors,
                       sample_size, save_checkpoint, train)
from .errors import (CheckpointMismatchError, ConfigError, DimensionError,  # noqa: E402
                     DomainError, IntegrationDivergedError, TrainingDivergedError)
from .molecule import PointCloudMolecule  # noqa: E402

log = logging.getLogger("flowbridge")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4


# -- config helpers --------------------------------------------------------------


def read_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def check_keys(cfg, allowed, required=(), where="config"):
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    missing = [k for k in required if k not in cfg]
    if missing:
        raise ConfigError(f"missing {where} keys: {missing}")


def resolve(path, base):
    return path if os.path.isabs(path) else os.path.join(base, path)


def read_molecules(path):
    try:
        return toydata.read_jsonl(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"data file not found: {path}") from exc
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed dataset {path}: {exc}") from exc


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_history(history, path):
    keys = sorted({k for row in history for k in row} - {"step"})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + keys)
        for row in history:
            writer.writerow([row["step"]] + [repr(row[k]) if k in row else "" for k in keys])


def _seeded(section: dict, seed):
    if seed is not None:
        section = {**section, "seed": seed}
    return section


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(cfg, base, args):
    check_keys(cfg, ("dataset", "output", "stats"), ("output",))
    dcfg = toydata.ToyDatasetConfig.from_dict(_seeded(cfg.get("dataset", {}), args.seed))
    out = resolve(cfg["output"], base)
    molecules = toydata.generate_dataset(dcfg)
    toydata.write_jsonl(molecules, out)
    stats_path = resolve(cfg.get("stats", out + ".stats.json"), base)
    write_json(toydata.dataset_stats(molecules, dcfg), stats_path)
    log.info("wrote %d complexes to %s", len(molecules), out)


def _train_state_dict(state: TrainState):
    obj = state.to_dict()
    obj.pop("elapsed", None)
    return obj


def cmd_train(cfg, base, args):
    check_keys(cfg, ("data", "output", "model", "train", "history", "resume", "prior",
                     "coord_scale"), ("data", "output"))
    data = read_molecules(resolve(cfg["data"], base))
    if not data:
        raise ConfigError("training data is empty")
    tcfg = TrainConfig.from_dict(_seeded(cfg.get("train", {}), args.seed))
    out = resolve(cfg["output"], base)
    if cfg.get("resume"):
        ck = load_checkpoint(resolve(cfg["resume"], base))
        model, priors = ck.model, ck.priors
        state = TrainState.from_dict(ck.train_state) if ck.train_state else TrainState()
        hist = ck.size_histogram
    else:
        mcfg = ModelConfig.from_dict(cfg.get("model", {}))
        model = BackboneModel(mcfg, rng=np.random.default_rng(tcfg.seed))
        prior = cfg.get("prior", "marginal")
        if prior == "marginal":
            priors = marginal_priors(data, mcfg.n_atom_types, mcfg.n_bond_types, tcfg.n_virtual_max,
                                     seed=tcfg.seed, coord_scale=cfg.get("coord_scale", 1.0))
        elif prior == "uniform":
            priors = Priors.uniform(mcfg.n_atom_types, mcfg.n_bond_types)
            priors.coord_scale = float(cfg.get("coord_scale", 1.0))
        else:
            raise ConfigError(f"unknown prior {prior!r}")
        state = TrainState()
        hist = toydata.size_histogram(data)
    for mol in data:
        mol.validate(model.config.n_atom_types, model.config.n_bond_types)
    try:
        state = train(model, data, tcfg, priors, state)
    finally:
        history_path = resolve(cfg.get("history", os.path.splitext(out)[0] + ".history.csv"), base)
        write_history(state.history, history_path)
    save_checkpoint(Checkpoint(model, priors, hist, tcfg.n_virtual_max, tcfg.to_dict(),
                               _train_state_dict(state)), out)
    log.info("trained %d steps; checkpoint %s", state.step, out)


def _reference_and_pairs(cfg, base, args, acfg):
    ck = load_checkpoint(resolve(cfg["checkpoint"], base))
    if "pairs" in cfg:
        pairs = alignment.read_pairs(resolve(cfg["pairs"], base))
    else:
        build = dict(cfg.get("build", {}))
        check_keys(build, ("contexts", "n_contexts", "samples_per_context", "properties",
                           "n_steps", "max_pairs_per_context"), ("contexts", "properties"),
                   where="build")
        contexts = read_molecules(resolve(build["contexts"], base))[:build.get("n_contexts")]
        props = dict(build["properties"])
        unknown = set(props) - set(toydata.ORACLE_DIRECTIONS)
        if unknown:
            raise ConfigError(f"unknown properties {sorted(unknown)}")
        rng = np.random.default_rng(acfg.seed)
        flow = FlowSettings(build.get("n_steps", acfg.flow.n_steps), acfg.flow.torus_k, acfg.flow.sigma)
        n_max = ck.n_virtual_max

        def size_fn(ctx, r):
            return sample_size(ctx.n_context, ck.size_histogram, n_max, r)

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", alignment.NoPairsWarning)
            pairs = alignment.build_preference_dataset(
                ck.model, contexts, toydata.property_oracles, props, rng, ck.priors, size_fn,
                build.get("samples_per_context", 4), toydata.ORACLE_DIRECTIONS, flow,
                build.get("max_pairs_per_context"))
        if cfg.get("pairs_output"):
            alignment.write_pairs(pairs, resolve(cfg["pairs_output"], base))
    if not pairs:
        raise ConfigError("no preference pairs available")
    return ck, pairs


def _align_like(cfg, base, args, mode):
    check_keys(cfg, ("checkpoint", "pairs", "build", "pairs_output", "alignment", "output",
                     "history"), ("checkpoint", "output"))
    acfg = alignment.AlignmentConfig.from_dict(_seeded(cfg.get("alignment", {}), args.seed))
    ck, pairs = _reference_and_pairs(cfg, base, args, acfg)
    if mode == "align":
        model, state, _ = alignment.align(ck.model, pairs, acfg, ck.priors)
    else:
        model, state, _ = alignment.finetune(ck.model, [p.winner for p in pairs], acfg, ck.priors)
    out = resolve(cfg["output"], base)
    write_history(state.history, resolve(cfg.get("history", os.path.splitext(out)[0] + ".history.csv"), base))
    save_checkpoint(Checkpoint(model, ck.priors, ck.size_histogram, ck.n_virtual_max,
                               ck.train_config, None, {mode: acfg.to_dict(), "n_pairs": len(pairs)}), out)


def cmd_align(cfg, base, args):
    _align_like(cfg, base, args, "align")


def cmd_finetune(cfg, base, args):
    _align_like(cfg, base, args, "finetune")


SUMMARY_COLUMNS = ("context_id", "sample", "n_nodes", "n_atoms", "removed", "sigma_tot_mean")


def cmd_sample(cfg, base, args):
    check_keys(cfg, ("checkpoint", "contexts", "n_per_context", "output", "summary", "n_steps",
                     "extra_nodes", "fixed_ligand", "n_contexts", "seed", "context_scale",
                     "context_shift"), ("checkpoint", "contexts", "output"))
    ck = load_checkpoint(resolve(cfg["checkpoint"], base))
    contexts = read_molecules(resolve(cfg["contexts"], base))[:cfg.get("n_contexts")]
    scale = float(cfg.get("context_scale", 1.0))
    shift = float(cfg.get("context_shift", 0.0))
    if scale != 1.0 or shift != 0.0:
        contexts = [toydata.perturb_context(c, scale, shift) for c in contexts]
    n_per = int(cfg.get("n_per_context", 1))
    if n_per < 0:
        raise ConfigError("n_per_context must be nonnegative")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    fixed = args.fixed_ligand or bool(cfg.get("fixed_ligand", False))
    extra = args.extra_nodes if args.extra_nodes is not None else cfg.get("extra_nodes")
    extra = ck.n_virtual_max // 2 if extra is None else int(extra)
    if extra < 0:
        raise ConfigError("extra_nodes must be nonnegative")
    flow = FlowSettings(n_steps=int(cfg.get("n_steps", 500)))
    rng = np.random.default_rng(seed)
    flat = [c for c in contexts for _ in range(n_per)]
    if flat and max(c.n_context for c in flat) > ck.model.config.max_context:
        raise CheckpointMismatchError("contexts exceed the model's context maximum")
    if fixed:
        sizes = [c.n_atoms for c in flat]
        results = generate(ck.model, flat, sizes, rng, ck.priors, flow, fixed_ligand=flat)
    else:
        sizes = [sample_size(c.n_context, ck.size_histogram, 0, rng) + extra for c in flat]
        results = generate(ck.model, flat, sizes, rng, ck.priors, flow)
    out = resolve(cfg["output"], base)
    summary = resolve(cfg.get("summary", os.path.splitext(out)[0] + ".summary.csv"), base)
    with open(out, "w") as fh, open(summary, "w", newline="") as sh:
        writer = csv.writer(sh)
        writer.writerow(SUMMARY_COLUMNS)
        for k, (ctx, res) in enumerate(zip(flat, results)):
            cid = ctx.meta.get("id", k // max(n_per, 1))
            rec = {"context_id": cid, "sample": k % max(n_per, 1), "n_nodes": sizes[k],
                   "removed": res.removed, "sigma_tot": res.sigma_tot.tolist(),
                   "molecule": res.molecule.to_json()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
            mean_sigma = float(res.sigma_tot.mean()) if res.sigma_tot.size else float("nan")
            writer.writerow([cid, rec["sample"], sizes[k], res.molecule.n_atoms, res.removed,
                             repr(mean_sigma)])


def read_samples(path):
    """Molecules from a sample file (``{"molecule": ...}`` lines) or a dataset file."""
    mols = []
    try:
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    mols.append(PointCloudMolecule.from_json(obj.get("molecule", obj)))
    except FileNotFoundError as exc:
        raise ConfigError(f"sample file not found: {path}") from exc
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed sample file {path}: {exc}") from exc
    return mols


def molecule_table(mols):
    recs = toydata.descriptor_records(mols)
    return evaluation.SampleTable.from_records(recs, toydata.DESCRIPTOR_COLUMNS)


def atom_table(mols):
    types = np.concatenate([m.atom_types for m in mols]) if mols else np.zeros(0, dtype=int)
    return evaluation.SampleTable(categorical={"atom_type": types})


def _load_for_eval(path, schema, base):
    if schema is not None:
        return [evaluation.load_table(resolve(path, base), resolve(schema, base))]
    mols = read_samples(resolve(path, base))
    return [molecule_table(mols), atom_table(mols)]


def cmd_eval(cfg, base, args):
    check_keys(cfg, ("reference", "samples", "schema", "output_json", "output_csv", "n_boot",
                     "boot_size", "bins_1d", "bins_joint", "seed", "joint_columns"),
               ("reference", "samples", "output_json"))
    schema = cfg.get("schema")
    samples = cfg["samples"]
    if isinstance(samples, str):
        samples = {"generated": samples}
    ref_tables = _load_for_eval(cfg["reference"], schema, base)
    method_tables = {name: _load_for_eval(p, schema, base) for name, p in samples.items()}
    for name, tables in method_tables.items():
        for rt, mt in zip(ref_tables, tables):
            if set(rt.continuous) != set(mt.continuous) or set(rt.categorical) != set(mt.categorical):
                raise ConfigError(f"columns of {name!r} do not match the reference")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    report = evaluation.MetricReport()
    for i, ref in enumerate(ref_tables):
        part = evaluation.compare_methods(
            ref, {name: tables[i] for name, tables in method_tables.items()},
            n_boot=int(cfg.get("n_boot", 20)), boot_size=int(cfg.get("boot_size", 500)), seed=seed,
            joint_columns=cfg.get("joint_columns"), bins_1d=int(cfg.get("bins_1d", 100)),
            bins_joint=int(cfg.get("bins_joint", 10)))
        report.metrics.update(part.metrics)
        report.info.setdefault("tables", []).append(part.info)
    report.write_json(resolve(cfg["output_json"], base))
    csv_path = cfg.get("output_csv", os.path.splitext(cfg["output_json"])[0] + ".csv")
    report.write_csv(resolve(csv_path, base))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "align": cmd_align,
            "finetune": cmd_finetune, "sample": cmd_sample, "eval": cmd_eval}


def build_parser():
    parser = argparse.ArgumentParser(prog="flowbridge", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--fixed-ligand", action="store_true",
                        help="sample: follow the true ligand fields, generate torsions only")
    parser.add_argument("--extra-nodes", type=int, default=None,
                        help="sample: computational nodes added to the drawn ligand size")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(args.config)
        base = os.path.dirname(os.path.abspath(args.config))
        COMMANDS[args.command](cfg, base, args)
    except (TrainingDivergedError, IntegrationDivergedError, FloatingPointError) as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointMismatchError as exc:
        print(f"error: checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, DimensionError, DomainError, TypeError, KeyError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
