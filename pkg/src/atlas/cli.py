"""Command-line interface.

Thin orchestration over the library: every subcommand loads inputs,
delegates to the corresponding module and writes plain-text artifacts.
Directory conventions at this scale are deliberately simple: embeddings
travel as ``he.hke`` / ``mif.hke`` / ``txt.hke`` triples, image planes as
``.npy`` arrays, and cohort structure as one ``.hkm`` manifest.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import align, counterfactual, downstream, ingest, preprocess, retrieval, service, textgen


def _load_flat_toml(path):
    """Parse the flat key = value subset of TOML used by our config files."""
    try:
        import tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except ModuleNotFoundError:
        pass
    out = {}
    for line in Path(path).read_text("utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        key, _, value = line.partition("=")
        value = value.strip()
        if value.startswith('"') and value.endswith('"'):
            parsed = value[1:-1]
        elif value in ("true", "false"):
            parsed = value == "true"
        else:
            try:
                parsed = int(value)
            except ValueError:
                parsed = float(value)
        out[key.strip()] = parsed
    return out


def _write_triplet(embeddings, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = {"HE": "he.hke", "MIF": "mif.hke", "TXT": "txt.hke"}
    for modality, matrix in embeddings.items():
        ingest.write_embeddings(matrix, out_dir / names[modality])


def _read_triplet(data_dir, ids=None):
    data_dir = Path(data_dir)
    names = {"HE": "he.hke", "MIF": "mif.hke", "TXT": "txt.hke"}
    return {m: ingest.read_embeddings(data_dir / n, ids=ids) for m, n in names.items()}


def _project_triplet(features, checkpoint_path):
    """Map raw feature triples through trained heads (eval mode)."""
    heads = align.load_checkpoint(checkpoint_path)
    out = {}
    for m, matrix in features.items():
        projected = align.project(heads[m], matrix.rows.astype(np.float64), training=False)
        out[m] = ingest.EmbeddingMatrix(m, projected.astype(np.float32), matrix.ids)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args):
    dataset = ingest.load_manifest(args.manifest)
    patients = dataset.patient_ids()
    print(f"slices: {len(dataset.slices)}")
    print(f"patches: {len(dataset.patches)}")
    print(f"patients: {len(patients)}")
    if args.split is not None:
        train, test = ingest.split_patients(dataset, args.split, args.seed)
        print(f"split at {args.split} (seed {args.seed}): "
              f"{len(train.slices)} train slices / {len(test.slices)} test slices")
    return 0


def cmd_synth(args):
    config = ingest.SynthConfig(
        n_patients=args.patients, patches_per_slice=args.patches_per_slice,
        latent_dim=args.latent_dim, noise_scale=args.noise, seed=args.seed)
    cohort = ingest.synth_cohort(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ingest.write_manifest(cohort.dataset, out / "cohort.hkm")
    _write_triplet(cohort.embeddings, out)
    print(f"wrote {out / 'cohort.hkm'} with {len(cohort.dataset.patches)} patches "
          f"and {cohort.embeddings['HE'].dim}-d features x3 modalities")
    return 0


def cmd_preprocess(args):
    in_dir = Path(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask = np.load(in_dir / "mask.npy")
    channel_paths = sorted(in_dir.glob("channel_*.npy"))
    if not channel_paths:
        print("no channel_*.npy planes found", file=sys.stderr)
        return 1
    planes = []
    for path in channel_paths:
        plane = np.load(path)
        normalized = preprocess.normalize_channel(plane, mask)
        planes.append(normalized)
        np.save(out_dir / f"normalized_{path.stem.split('_', 1)[1]}.npy", normalized)
    image = preprocess.NormalizedImage(np.stack(planes))
    coords, status = preprocess.generate_patches(
        mask.shape[0], mask.shape[1], mask, patch_size=args.patch,
        seed=args.seed, jitter=args.jitter)
    if status != "ok":
        print(f"warning: {status}", file=sys.stderr)
    with open(out_dir / "coords.txt", "w") as fh:
        for c in coords:
            fh.write(f"{c.x_left} {c.x_right} {c.y_bottom} {c.y_top}\n")
    with open(out_dir / "means.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_index"] + [p.stem.split("_", 1)[1] for p in channel_paths])
        for i, c in enumerate(coords):
            window = image.channels[:, c.y_bottom:c.y_top, c.x_left:c.x_right]
            means = [textgen.patch_channel_mean(window[j]) for j in range(len(planes))]
            writer.writerow([i] + [f"{m:.6g}" for m in means])
    print(f"normalized {len(planes)} channels, kept {len(coords)} patches")
    return 0


def cmd_textgen(args):
    dataset = ingest.load_manifest(args.metadata)
    by_slice = {}
    for patch in dataset.patches:
        by_slice.setdefault(patch.slice_id, []).append(patch)
    patches_dir = Path(args.patches) if args.patches else None
    new_patches = []
    for slice_record in dataset.slices:
        patches = by_slice.get(slice_record.slice_id, [])
        if not patches:
            continue
        mu_table = np.vstack([p.mu for p in patches])
        if mu_table.shape[0] >= 2:
            summaries = textgen.region_summary(mu_table, slice_record.channel_names)
        else:
            summaries = None
        for k, patch in enumerate(patches):
            patterns = []
            for c in range(len(slice_record.channel_names)):
                plane_path = (patches_dir / f"{patch.patch_id}_c{c}.npy"
                              if patches_dir else None)
                if plane_path is not None and plane_path.exists():
                    metrics = textgen.spatial_metrics(np.load(plane_path))
                else:
                    # abundance-only fallback: treat the patch as covered
                    metrics = textgen.SpatialMetrics(0.0, 1.0, 1.0, 0.0, 1.0)
                patterns.append(textgen.assign_pattern(metrics))
            if summaries is None:
                continue
            metadata = slice_record.metadata if slice_record.has_text else None
            text = textgen.synthesize_text(summaries[k], patterns, metadata)
            new_patches.append(ingest.PatchRecord(
                patch.patch_id, patch.slice_id, patch.coord, patch.mu,
                text=text, metadata_text=textgen.strip_biomarkers(text)))
    updated = ingest.Dataset(dataset.slices, tuple(new_patches))
    ingest.write_manifest(updated, args.out)
    print(f"wrote {len(new_patches)} patch descriptions to {args.out}")
    return 0


def cmd_train(args):
    overrides = _load_flat_toml(args.config) if args.config else {}
    config = align.AlignConfig(**overrides)
    features = _read_triplet(args.data)
    result = align.train({m: features[m].rows.astype(np.float64)
                          for m in align.MODALITY_ORDER}, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    align.save_checkpoint(result.heads, out / "heads.ck", config=config)
    align.write_loss_trace(result.loss_trace, out / "loss_trace.csv")
    print(f"trained {len(result.loss_trace)} steps; "
          f"final loss {result.loss_trace[-1][1]:.4f}; checkpoint at {out / 'heads.ck'}")
    return 0


LABEL_FIELDS = ("organ_type", "disease", "tissue_type", "t_stage", "n_stage",
                "m_stage", "grade")


def _bundle_from_data(data_dir, manifest_path, checkpoint=None):
    dataset = ingest.load_manifest(manifest_path)
    ids = tuple(p.patch_id for p in dataset.patches)
    features = _read_triplet(data_dir, ids=ids)
    if checkpoint:
        features = _project_triplet(features, checkpoint)
    slices = {s.slice_id: s for s in dataset.slices}
    labels = {
        field: tuple(getattr(slices[p.slice_id].metadata, field) for p in dataset.patches)
        for field in LABEL_FIELDS
    }
    abundance = np.vstack([p.mu for p in dataset.patches])
    channels = dataset.slices[0].channel_names
    region_ids = tuple(p.slice_id for p in dataset.patches)
    gallery = retrieval.build_index(features["MIF"], labels=labels,
                                    abundance=abundance, channels=channels,
                                    region_ids=region_ids)
    he = features["HE"].normalized().rows.astype(np.float64)
    metadata = [slices[p.slice_id].metadata for p in dataset.patches]
    txt_rows = features["TXT"].normalized().rows.astype(np.float64)
    text_vectors = {}
    for i, p in enumerate(dataset.patches):
        text = textgen.build_clinical_prefix(metadata[i])
        text_vectors.setdefault(text, txt_rows[i])
    thumbnails = {p.patch_id: service.abundance_thumbnail(p.mu) for p in dataset.patches}
    return service.ServiceBundle(gallery, ids, he, metadata, text_vectors, thumbnails)


def cmd_index(args):
    if args.action == "build":
        bundle = _bundle_from_data(args.data, args.manifest, checkpoint=args.checkpoint)
        service.snapshot(bundle, args.out)
        print(f"snapshot with {bundle.gallery.n} gallery rows at {args.out}")
        return 0
    bundle = service.restore(args.snapshot)
    if args.action == "query":
        row = bundle.query_row(args.patch_id)
        ranked = retrieval.query(bundle.gallery, bundle.query_he[row], args.k)
        for pid, score in zip(ranked.ids, ranked.scores):
            print(f"{pid}\t{score:.6f}")
        return 0
    if args.action == "eval":
        hits = {k: 0 for k in args.k_list}
        n = len(bundle.query_ids)
        k_max = max(args.k_list)
        gallery_ids = np.asarray(bundle.gallery.ids, dtype=object)
        if args.exclude_own_slice:
            # drop the query's own slice from the gallery; the truth patch
            # goes with it, so this measures neighborhood consistency only
            for i, qid in enumerate(bundle.query_ids):
                region = bundle.gallery.region_ids[bundle.gallery.index_of(qid)]
                ranked = retrieval.query(bundle.gallery, bundle.query_he[i], k_max,
                                         exclude_region=region)
                for k in args.k_list:
                    hits[k] += qid in ranked.ids[:k]
        else:
            idx, _ = retrieval.query_batch(bundle.gallery, bundle.query_he, k_max)
            for i, qid in enumerate(bundle.query_ids):
                retrieved = gallery_ids[idx[i]]
                for k in args.k_list:
                    hits[k] += qid in retrieved[:k]
        writer = csv.writer(sys.stdout)
        writer.writerow(["k", "recall"])
        for k in args.k_list:
            writer.writerow([k, f"{hits[k] / n:.6f}"])
        return 0
    raise AssertionError(args.action)


def cmd_probe(args):
    dataset = ingest.load_manifest(args.manifest)
    features = _read_triplet(args.data)
    if args.checkpoint:
        features = _project_triplet(features, args.checkpoint)
    slices = {s.slice_id: s for s in dataset.slices}
    y = [getattr(slices[p.slice_id].metadata, args.label) for p in dataset.patches]
    if args.modality == "fusion":
        x = downstream.fuse_concat(features["HE"].rows, features["MIF"].rows)
    else:
        x = features[args.modality.upper()].rows.astype(np.float64)
    groups = [p.slice_id for p in dataset.patches]
    strata = {s.slice_id: getattr(s.metadata, args.label) for s in dataset.slices}
    plan = downstream.make_folds(sorted(set(groups)), "slice", k=args.folds,
                                 seed=args.seed, strata=strata)
    best_c, results = downstream.probe_grid(x, y, groups, plan)
    writer = csv.writer(sys.stdout)
    writer.writerow(["C", "fold", "macro_f1"])
    for c, scores in results.items():
        for fold, f1 in enumerate(scores):
            writer.writerow([c, fold, f"{f1:.6f}"])
    mean, std = float(np.mean(results[best_c])), float(np.std(results[best_c]))
    print(f"# best C = {best_c} (macro-F1 {mean:.4f} +/- {std:.4f})")
    return 0


def cmd_mil(args):
    dataset = ingest.load_manifest(args.manifest)
    features = _read_triplet(args.data, ids=tuple(p.patch_id for p in dataset.patches))
    if args.checkpoint:
        features = _project_triplet(features, args.checkpoint)
    rows = features["MIF"].rows.astype(np.float64)
    row_of = {pid: i for i, pid in enumerate(features["MIF"].ids)}
    bags, bag_slice = [], []
    for s in dataset.slices:
        members = [row_of[p.patch_id] for p in dataset.patches if p.slice_id == s.slice_id]
        if members:
            bags.append(rows[members])
            bag_slice.append(s)
    patients = [s.patient_id for s in bag_slice]
    plan = downstream.make_folds(sorted(set(patients)), "patient", k=args.folds,
                                 seed=args.seed)
    config = downstream.MilConfig(seed=args.seed, epochs=args.epochs,
                                  hidden_dim=args.hidden, attention_dim=args.attention)
    if args.task == "response":
        labels = [1 if s.metadata.treatment_response else 0 for s in bag_slice]
        results = downstream.train_mil(bags, labels, patients, plan, "bce", config)
        metric = "auroc"
    else:
        times = [s.metadata.survival_months or 0.0 for s in bag_slice]
        events = [1 if s.metadata.survival_status == "Deceased" else 0 for s in bag_slice]
        results = downstream.train_mil(bags, (times, events), patients, plan, "cox", config)
        metric = "c_index"
    writer = csv.writer(sys.stdout)
    writer.writerow(["fold", "metric", "value", "status"])
    for r in results:
        value = r.metrics.get(metric, float("nan"))
        writer.writerow([r.fold, metric, f"{value:.6f}", r.status])
    mean, std = downstream.summarize_folds(results, metric)
    print(f"# {metric}: {mean:.4f} +/- {std:.4f}")
    if args.task == "survival" and args.km_out:
        held = {i: s for r in results for i, s in r.predictions.items()}
        idx = sorted(held)
        risks = np.array([held[i] for i in idx])
        km_groups = downstream.median_risk_groups(risks)
        km_times = np.array([times[i] for i in idx])
        km_events = np.array([events[i] for i in idx])
        logrank = downstream.km_logrank(km_times, km_events, km_groups)
        with open(args.km_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "survival", "group"])
            for group, (curve_t, curve_s) in logrank.curves.items():
                for t, s in zip(curve_t, curve_s):
                    writer.writerow([f"{t:.6g}", f"{s:.6g}", group])
        print(f"# log-rank chi2 {logrank.chi_square:.4f} p {logrank.p_value:.4g} "
              f"-> {args.km_out}")
    return 0


def cmd_counterfactual(args):
    bundle = service.restore(args.snapshot)
    svc = service.AtlasService(bundle, service.ServiceConfig())
    query_ids = args.queries.split(",") if args.queries else None
    edits = {}
    if args.edit:
        for pair in args.edit.split(","):
            key, _, value = pair.partition("=")
            edits[key.strip()] = value.strip()
    payload = {"edits": edits, "alpha": args.alpha, "k": args.k}
    if query_ids:
        payload["query_ids"] = query_ids
    if args.label_column:
        payload["label_column"] = args.label_column
    response = svc.run_counterfactual(payload)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "composition.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "mean_control", "mean_counterfactual",
                         "adjusted_p", "significant"])
        for row in response["composition"]:
            writer.writerow([row["category"], row["mean_control"],
                             row["mean_counterfactual"], row["adjusted_p"],
                             "1" if row["significant"] else "0"])
    (out / "cluster_shifts.csv").write_text(svc.run_shift_csv(response["run_id"]))
    with open(out / "prototypes.txt", "w") as fh:
        for cluster, ids in sorted(response["prototypes"].items()):
            fh.write(f"{cluster}\t{','.join(ids)}\n")
    # PCA of the largest cluster's shift vectors
    run_artifacts = svc.runs[response["run_id"]]
    assignments = np.array([run_artifacts["clusters"]["assignments"][q]
                            for q in response["query_ids"]])
    largest = int(np.bincount(assignments).argmax())
    rows = [bundle.query_row(q) for q in response["query_ids"]]
    run = counterfactual.run_pair(
        bundle.query_he[rows],
        bundle.embed_text(textgen.build_clinical_prefix(
            bundle.query_metadata[rows[0]])),
        bundle.embed_text(textgen.perturb_metadata(
            bundle.query_metadata[rows[0]], edits)[1] if edits else
            textgen.build_clinical_prefix(bundle.query_metadata[rows[0]])),
        bundle.gallery, alpha=args.alpha, k=args.k)
    _, _, shifts = counterfactual.shift_matrix(run, bundle.gallery.abundance)
    pca = counterfactual.pca_shifts(shifts[assignments == largest],
                                    channels=bundle.gallery.channels)
    if pca.status == "ok":
        with open(out / "pca_scores.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query_index", "pc1", "pc2"])
            for i, (a, b) in enumerate(pca.scores):
                writer.writerow([i, f"{a:.6g}", f"{b:.6g}"])
        with open(out / "pca_loadings.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["channel", "pc1", "pc2"])
            for name, (a, b) in zip(pca.kept_channels, pca.loadings):
                writer.writerow([name, f"{a:.6g}", f"{b:.6g}"])
    else:
        (out / "pca_status.txt").write_text(pca.status + "\n")
    print(f"report bundle in {out} (run {response['run_id']})")
    return 0


def cmd_serve(args):
    overrides = _load_flat_toml(args.config) if args.config else {}
    if args.snapshot:
        overrides["snapshot_path"] = args.snapshot
    if args.port:
        overrides["port"] = args.port
    config = service.ServiceConfig(**overrides)
    if not config.snapshot_path:
        print("serve needs a snapshot (--snapshot or config)", file=sys.stderr)
        return 1
    bundle = service.restore(config.snapshot_path)
    server = service.serve(bundle, config, install_signal_handlers=True)
    print(f"serving {bundle.gallery.n} gallery rows on "
          f"http://{config.host}:{config.port}/v1/health")
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="atlas",
                                     description="tri-modal tissue-patch toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--patients", type=int, default=32)
    p.add_argument("--patches-per-slice", type=int, default=8)
    p.add_argument("--latent-dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="normalize channels and extract patches")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=256)
    p.add_argument("--jitter", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("textgen", help="synthesize patch descriptions")
    p.add_argument("--patches", default=None)
    p.add_argument("--metadata", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_textgen)

    p = sub.add_parser("train", help="train projection heads")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build, query or evaluate a snapshot")
    p.add_argument("action", choices=("build", "query", "eval"))
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--snapshot")
    p.add_argument("--out")
    p.add_argument("--patch-id")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--k-list", type=lambda s: [int(v) for v in s.split(",")],
                   default=[1, 5, 10, 20, 50])
    p.add_argument("--exclude-own-slice", action="store_true")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("probe", help="linear probing with C grid")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--label", default="organ_type")
    p.add_argument("--modality", default="fusion",
                   choices=("he", "mif", "txt", "fusion"))
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("mil", help="slice-level MIL prediction")
    p.add_argument("--task", choices=("response", "survival"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--attention", type=int, default=32)
    p.add_argument("--km-out", default=None)
    p.set_defaults(func=cmd_mil)

    p = sub.add_parser("counterfactual", help="paired perturbation analysis")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--queries", default=None)
    p.add_argument("--edit", default=None)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--label-column", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_counterfactual)

    p = sub.add_parser("serve", help="run the HTTP query service")
    p.add_argument("--config", default=None)
    p.add_argument("--snapshot", default=None)
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
