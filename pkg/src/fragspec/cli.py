"""Command-line entry point: ``fragspec <verb> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical
failure. Log lines go to standard error; results go to the files named by flags.
"""

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources

import numpy as np

log = logging.getLogger("fragspec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="fragspec", description="Fragmentation-DAG spectrum prediction toolkit.",
                formatter_class=fmt)
    p.add_argument("--mass-table", default=None,
                   help="tab-separated element table (symbol, mass, valence) replacing the bundled one")
    p.add_argument("--threads", type=int, default=1, help="molecule-level fan-out")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="logging verbosity")
    sub = p.add_subparsers(dest="verb", parser_class=_Parser)

    s = sub.add_parser("fragment", help="build a fragmentation DAG", formatter_class=fmt)
    src = s.add_mutually_exclusive_group()
    src.add_argument("--smiles", help="molecule as SMILES")
    src.add_argument("--mol", "--molecules", dest="molecules",
                     help="molecule JSONL file (first record, or --id)")
    src.add_argument("--example", default=None,
                     help="bundled example molecule (methylaminomethanol when no source is given)")
    s.add_argument("--id", default=None, help="molecule id to pick from --molecules")
    s.add_argument("--depth", type=int, default=3, help="fragmentation depth d")
    s.add_argument("--hydrogen-tol", type=int, default=None, help="also report the mass support for tolerance J")
    s.add_argument("--mode", default="protonated", choices=["neutral", "protonated"],
                   help="adduct mode for reported masses")
    s.add_argument("--out", "--dump", dest="dump", default=None, help="write the JSONL node/edge dump here")

    s = sub.add_parser("synth", help="generate synthetic oracle data", formatter_class=fmt)
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, required=True, help="random seed (mandatory)")
    s.add_argument("--n", type=int, default=200, help="number of molecules")
    s.add_argument("--min-heavy", type=int, default=2, help="smallest molecule (heavy atoms)")
    s.add_argument("--max-heavy", type=int, default=6, help="largest molecule (heavy atoms)")
    s.add_argument("--depth", type=int, default=3, help="fragmentation depth d")
    s.add_argument("--offset-weights", type=_float_list, default=[0.05, 0.2, 0.5, 0.2, 0.05],
                   help="oracle hydrogen-offset weights for -j..j")
    s.add_argument("--decay", type=float, default=0.6, help="oracle depth decay")
    s.add_argument("--os-fraction", type=float, default=0.0, help="injected OS mass q")
    s.add_argument("--split", type=_float_list, default=[0.6, 0.2, 0.2], help="train,val,test ratios")

    s = sub.add_parser("train", help="train a model", formatter_class=fmt)
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", default=None, help="key=value config file")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--seed", type=int, required=True, help="seed for init and shuffling (mandatory)")
    s.add_argument("--history", default=None, help="write per-epoch history JSON here")

    s = sub.add_parser("predict", help="predict spectra and annotations", formatter_class=fmt)
    s.add_argument("--model", required=True, help="checkpoint path")
    s.add_argument("--molecules", required=True, help="molecule JSONL file")
    s.add_argument("--energies", type=_int_list, default=[20], help="collision energies for every molecule")
    s.add_argument("--energies-from", default=None, help="spectrum file supplying per-id energies")
    s.add_argument("--out", required=True, help="predicted spectrum file")
    s.add_argument("--annotations", default=None, help="annotated-peak JSONL output")
    s.add_argument("--top", type=int, default=3, help="annotations kept per peak")

    s = sub.add_parser("evaluate", help="score predictions against observed spectra", formatter_class=fmt)
    s.add_argument("--pred", required=True, help="predicted spectrum file")
    s.add_argument("--truth", required=True, help="observed spectrum file")
    s.add_argument("--metrics", default="cos001,coshun,recall,os", help="comma-separated metric names")
    s.add_argument("--report", required=True, help="CSV report path")

    s = sub.add_parser("retrieve", help="candidate ranking benchmark", formatter_class=fmt)
    s.add_argument("--truth-spectra", required=True, help="observed spectra to identify")
    s.add_argument("--corpus", required=True, help="molecule JSONL corpus (must contain the true molecules)")
    s.add_argument("--model", required=True, help="checkpoint path")
    s.add_argument("--k", type=_int_list, default=[1, 3, 5, 10], help="Top-k cutoffs")
    s.add_argument("--size", type=int, default=50, help="candidates per query")
    s.add_argument("--report", required=True, help="CSV report path")

    s = sub.add_parser("ensemble", help="annotation consistency of several models", formatter_class=fmt)
    s.add_argument("--models", required=True, help="comma-separated checkpoint paths")
    s.add_argument("--molecules", required=True, help="molecule JSONL file")
    s.add_argument("--truth", default=None, help="observed spectra for cosine statistics")
    s.add_argument("--energies", type=_int_list, default=[20], help="collision energies for every molecule")
    s.add_argument("--p-min", type=float, default=0.05, help="minimum formula probability scored")
    s.add_argument("--report", required=True, help="JSON report path")

    s = sub.add_parser("gradcheck", help="finite-difference gradient check", formatter_class=fmt)
    s.add_argument("--smiles", default="CNCO", help="molecule as SMILES")
    s.add_argument("--config", default=None, help="key=value config file")
    s.add_argument("--hidden-dim", type=int, default=4, help="hidden width (keeps the check small)")
    s.add_argument("--seed", type=int, default=0, help="model init seed")
    s.add_argument("--tolerance", type=float, default=1e-4, help="relative error threshold")
    s.add_argument("--alpha", type=float, default=0.1, help="weight on every entropy term")
    s.add_argument("--report", default=None, help="JSON report path")
    return p


# ------------------------------------------------------------------ verbs

def _load_mol(args):
    from .molio import parse_smiles, read_molecules
    if args.smiles:
        return parse_smiles(args.smiles, mol_id="query")
    if args.molecules:
        mols = read_molecules(args.molecules)
    else:
        name = args.example or "methylaminomethanol"
        path = resources.files("fragspec") / "data" / f"{name}.jsonl"
        if not path.is_file():
            raise FileNotFoundError(f"no bundled example named {name!r}")
        mols = read_molecules(str(path))
    if args.id is not None:
        mols = [m for m in mols if m.id == args.id]
        if not mols:
            raise ValueError(f"molecule {args.id!r} not found")
    if not mols:
        raise ValueError("no molecules in input")
    return mols[0]


def cmd_fragment(args):
    from .fragdag import mass_set, rec_frag
    from .molio import heavy_skeleton
    mol = _load_mol(args)
    dag = rec_frag(heavy_skeleton(mol), args.depth)
    if args.dump:
        dag.dump(args.dump)
    line = f"nodes={len(dag)} edges={len(dag.edges)}"
    if args.hydrogen_tol is not None:
        line += f" masses={len(mass_set(dag, args.hydrogen_tol, args.mode))}"
    print(line)
    return EXIT_OK


def cmd_synth(args):
    from .synth import OracleParams, random_molecules, synth_generate
    from .train import save_dataset, split_dataset
    mols = random_molecules(args.n, args.seed, args.min_heavy, args.max_heavy)
    oracle = OracleParams(decay=args.decay, offset_weights=tuple(args.offset_weights),
                          os_fraction=args.os_fraction, seed=args.seed)
    records = synth_generate(mols, oracle, args.depth)
    split_dataset(records, tuple(args.split), args.seed)
    save_dataset(args.out, records)
    log.info("event=synth records=%d out=%s", len(records), args.out)
    return EXIT_OK


def cmd_train(args):
    from .gnn import ModelConfig
    from .train import TrainSettings, load_dataset, read_config, train_model
    from dataclasses import replace
    if args.config:
        config, settings = read_config(args.config)
    else:
        config, settings = ModelConfig(), TrainSettings()
    config = replace(config, seed=args.seed)
    settings = replace(settings, seed=args.seed)
    records = load_dataset(args.data)
    model, hist = train_model(records, config, settings)
    model.save(args.out, extra={"best_epoch": hist.best_epoch,
                                "settings": vars(settings)})
    if args.history:
        with open(args.history, "w") as fh:
            json.dump(hist.as_dict(), fh, indent=1)
    log.info("event=train best_epoch=%d best_val=%.6f out=%s", hist.best_epoch,
             min(hist.val_loss), args.out)
    return EXIT_OK


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def cmd_predict(args):
    from .gnn import Model
    from .molio import read_molecules
    from .probdist import annotated_peaks
    from .spectrum import read_spectra, write_spectra
    model = Model.load(args.model)
    mols = read_molecules(args.molecules)
    energies = {}
    if args.energies_from:
        energies = {s.id: s.energies for s in read_spectra(args.energies_from)}

    def run(mol):
        state, spec = model.predict(mol, energies.get(mol.id, tuple(args.energies)))
        return spec, annotated_peaks(state, top=args.top, mol_id=mol.id)

    results = _map(run, mols, args.threads)
    write_spectra(args.out, [r[0] for r in results])
    if args.annotations:
        with open(args.annotations, "w") as fh:
            for _, peaks in results:
                for rec in peaks:
                    fh.write(json.dumps(rec) + "\n")
    log.info("event=predict molecules=%d out=%s", len(mols), args.out)
    return EXIT_OK


METRIC_NAMES = ("cos001", "coshun", "recall", "os")


def cmd_evaluate(args):
    from .metrics import cos_binned, cos_hungarian, measured_os, recall_metrics
    from .spectrum import read_spectra
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = set(wanted) - set(METRIC_NAMES)
    if bad:
        raise UsageError(f"unknown metrics: {', '.join(sorted(bad))}")
    preds = {s.id: s for s in read_spectra(args.pred, normalize=False)}
    truths = read_spectra(args.truth)
    columns = []
    for m in wanted:
        columns += {"cos001": ["cos001"], "coshun": ["coshun"], "recall": ["recall", "wrecall"],
                    "os": ["os_measured", "os_pred", "os_abs_error"]}[m]
    rows = []
    for t in truths:
        if t.id not in preds:
            raise ValueError(f"no prediction for {t.id!r}")
        p = preds[t.id]
        row = {"molecule_id": t.id}
        pn = p.normalized() if p.total > 0 else p
        if "cos001" in wanted:
            row["cos001"] = cos_binned(t, pn)
        if "coshun" in wanted:
            row["coshun"] = cos_hungarian(t, pn)
        if "recall" in wanted:
            row["recall"], row["wrecall"] = recall_metrics(t, p.masses)
        if "os" in wanted:
            row["os_measured"] = measured_os(t, p.masses)
            row["os_pred"] = max(0.0, 1.0 - p.total)
            row["os_abs_error"] = abs(row["os_measured"] - row["os_pred"])
        rows.append(row)
    with open(args.report, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["molecule_id"] + columns)
        for row in rows:
            w.writerow([row["molecule_id"]] + [f"{row[c]:.6f}" for c in columns])
        for name, fn in (("mean", np.mean), ("std", np.std)):
            w.writerow([name] + [f"{fn([r[c] for r in rows]):.6f}" for c in columns])
    for c in columns:
        log.info("event=evaluate metric=%s mean=%.6f", c, float(np.mean([r[c] for r in rows])))
    return EXIT_OK


def cmd_retrieve(args):
    from .gnn import Model
    from .molio import read_molecules
    from .retrieve import build_candidates, rank_candidates, topk_accuracy
    from .spectrum import read_spectra
    model = Model.load(args.model)
    corpus = read_molecules(args.corpus)
    by_id = {m.id: m for m in corpus}
    truths = read_spectra(args.truth_spectra)
    results = []
    for t in truths:
        if t.id not in by_id:
            raise ValueError(f"true molecule {t.id!r} missing from corpus")
        cands = build_candidates(by_id[t.id], corpus, args.size)
        res = rank_candidates(t, cands, t.id, lambda g, e=t.energies: model.predict(g, e)[1],
                              ks=args.k)
        res["id"] = t.id
        results.append(res)
    with open(args.report, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["molecule_id", "rank"] + [f"top{k}" for k in args.k])
        for r in results:
            w.writerow([r["id"], r["rank"]] + [int(r["hits"][k]) for k in args.k])
        acc = topk_accuracy(results, args.k)
        w.writerow(["mean", f"{np.mean([r['rank'] for r in results]):.3f}"]
                   + [f"{acc[k]:.6f}" for k in args.k])
    for k in args.k:
        log.info("event=retrieve top%d=%.4f", k, acc[k])
    return EXIT_OK


def cmd_ensemble(args):
    from .gnn import Model
    from .metrics import ensemble_consistency
    from .molio import read_molecules
    from .spectrum import read_spectra
    models = [Model.load(p) for p in args.models.split(",") if p]
    cfgs = {(m.config.d, m.config.j, m.config.mode) for m in models}
    if len(cfgs) > 1:
        raise ValueError("ensemble members disagree on depth, hydrogen tolerance or mode")
    mols = read_molecules(args.molecules)
    truths = None
    energies = {}
    if args.truth:
        tmap = {s.id: s for s in read_spectra(args.truth)}
        truths = [tmap[m.id] for m in mols]
        energies = {s.id: s.energies for s in truths}
    prepared = [models[0].prepare(m, energies.get(m.id, tuple(args.energies))) for m in mols]
    states = [[m.latent(p) for p in prepared] for m in models]
    out = ensemble_consistency(states, truths, args.p_min)
    out.pop("per_formula_entropies")
    with open(args.report, "w") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)
    log.info("event=ensemble cons=%.4f maj=%.4f", out["cons"], out["maj"])
    return EXIT_OK


def cmd_gradcheck(args):
    from dataclasses import replace
    from .gnn import Batch, Model, ModelConfig
    from .molio import parse_smiles
    from .tensor import grad_check
    from .train import batch_objective, read_config
    from .synth import OracleParams, synth_generate
    config = read_config(args.config)[0] if args.config else ModelConfig(j=2, d=2)
    config = replace(config, hidden_dim=args.hidden_dim, seed=args.seed)
    mol = parse_smiles(args.smiles, mol_id="query")
    j = config.j
    weights = np.ones(2 * j + 1)
    rec = synth_generate([mol], OracleParams(offset_weights=tuple(weights), os_fraction=0.1,
                                             seed=args.seed), config.d)[0]
    model = Model(config)
    batch = Batch([model.prepare(mol, rec.energies, rec.spectrum)])
    alphas = {k: args.alpha for k in ("n", "f", "f|n", "n|f")}
    report = grad_check(lambda: batch_objective(model, batch, alphas), model.param_list(),
                        tolerance=args.tolerance)
    worst = max(e["max_rel_error"] for e in report["params"])
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, indent=1)
    log.info("event=gradcheck params=%d worst=%.3e passed=%s", len(report["params"]), worst,
             report["passed"])
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


COMMANDS = {
    "fragment": cmd_fragment, "synth": cmd_synth, "train": cmd_train, "predict": cmd_predict,
    "evaluate": cmd_evaluate, "retrieve": cmd_retrieve, "ensemble": cmd_ensemble,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None):
    from .fragdag import FragmentationError
    from .molio import use_element_table
    from .train import TrainingDiverged
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if not args.verb:
            raise UsageError("missing command")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s level=%(levelname)s %(message)s", force=True)
    try:
        if args.mass_table:
            use_element_table(args.mass_table)
        return COMMANDS[args.verb](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        log.error("event=numeric_failure detail=%s", exc)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, FragmentationError) as exc:
        log.error("event=data_error detail=%s", exc)
        return EXIT_DATA
    finally:
        if args.mass_table:
            use_element_table(None)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
