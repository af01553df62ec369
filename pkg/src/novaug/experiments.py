"""Multi-run experiment drivers: method comparisons, class-count sweeps,
and checkpoint analyses. The CLI is a thin shell over these."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .analysis import (
    fit_class_models,
    kl_alignment,
    pca_2d,
    proxy_proxy_similarity,
    proxy_sample_similarity,
    recall_at_k,
)
from .config import ExperimentConfig
from .data import Dataset, budget_pool_spec, fixed_budget_split, make_synthetic
from .losses import EmbeddingBatch
from .pipeline import (
    RunResult,
    TrainState,
    embed_dataset,
    load_datasets,
    run_experiment,
)
from .synthesis import PSParams, ps_synthesize_batch
from .tensor import Tensor, no_grad


def make_run_dir(root, method, seed):
    """Append-only run directory `<method>-<seed>-<timestamp>[-n]`."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = f"{method}-{seed}-{stamp}"
    candidate = root / base
    counter = 1
    while candidate.exists():
        candidate = root / f"{base}-{counter}"
        counter += 1
    candidate.mkdir()
    return candidate


def synthetic_similarity_stats(result: RunResult, samples=512):
    """Similarity diagnostics for the run's synthetic classes.

    For the generator methods, novel-class vectors come from the trained
    generator in eval mode; for pair interpolation they are synthesized from
    eval-mode embeddings of training batches. Returns None for vanilla runs
    (nothing synthetic to measure) and for existing-class augmentation
    (its synthetics carry real labels, so there is no novel proxy bank).
    """
    state = result.state
    config = result.config
    rng = np.random.default_rng([config.seed, 0x51A7])
    if config.method == "l2a_nc" and state.generator is not None:
        gen = state.generator
        gen.eval()
        universe = gen.label_universe()
        reps = int(np.ceil(samples / len(universe)))
        labels = np.repeat(universe, reps)[:samples]
        with no_grad():
            vectors = gen(labels, Tensor(rng.standard_normal((len(labels), gen.noise_dim))))
        gen.train()
        novel, novel_labels = state.bank.novel_only()
        sample_stats = proxy_sample_similarity(
            EmbeddingBatch(Tensor(vectors.data), labels), novel.data, novel_labels
        )
        proxy_stats = proxy_proxy_similarity(state.bank.real.data, novel.data)
    elif config.method == "ps":
        sims, tilde_rows = [], []
        state.embedder.eval()
        batch_size = config["train.batch_size"]
        max_pairs = max(config.novel_count(state.num_real_classes), 1)
        while len(sims) < samples:
            idx = rng.choice(result.train.size, size=batch_size,
                             replace=result.train.size < batch_size)
            with no_grad():
                emb = state.embedder(Tensor(result.train.features[idx]))
                out = ps_synthesize_batch(
                    EmbeddingBatch(emb, result.train.labels[idx]),
                    state.bank.real,
                    PSParams(alpha=config["ps.alpha"]),
                    rng,
                    max_pairs=max_pairs,
                    first_new_label=state.num_real_classes + 1,
                )
            if out is None:
                continue
            synth, p_tilde, _ = out
            sims.extend(np.sum(synth.vectors.data * p_tilde.data, axis=1).tolist())
            tilde_rows.append(p_tilde.data)
        state.embedder.train()
        sims = np.array(sims[:samples])
        sample_stats = {"mean": float(sims.mean()), "min": float(sims.min())}
        proxy_stats = proxy_proxy_similarity(
            state.bank.real.data, np.concatenate(tilde_rows)
        )
    else:
        return None
    return {
        "proxy_sample_mean": sample_stats["mean"],
        "proxy_sample_min": sample_stats["min"],
        "proxy_proxy_mean": proxy_stats["mean"],
        "proxy_proxy_max": proxy_stats["max"],
    }


def compare_methods(config: ExperimentConfig, methods, seeds, out_root=None,
                    similarity_samples=512):
    """Paired runs: every method sees identical data within a seed row.

    Returns one summary dict per method with mean/std recall per k, the
    per-seed data checksums (identical across methods by construction), and
    similarity diagnostics for the synthetic-class methods.
    """
    k_list = config["eval.recall_k"]
    rows = []
    per_method_results = {}
    for method in methods:
        recalls = {k: [] for k in k_list}
        checksums = []
        sim_stats = []
        results = []
        for seed in seeds:
            run_cfg = config.with_updates(method=method, seed=seed)
            out_dir = make_run_dir(out_root, method, seed) if out_root else None
            result = run_experiment(run_cfg, out_dir=out_dir)
            results.append(result)
            checksums.append(result.train.checksum())
            for k in k_list:
                if k in result.recalls:
                    recalls[k].append(result.recalls[k])
            stats = synthetic_similarity_stats(result, samples=similarity_samples)
            if stats is not None:
                sim_stats.append(stats)
        row = {"method": method, "seeds": list(seeds),
               "data_checksum": ";".join(checksums)}
        for k in k_list:
            values = np.array(recalls[k])
            row[f"recall@{k}_mean"] = float(values.mean())
            row[f"recall@{k}_std"] = float(values.std(ddof=1) if len(values) > 1 else 0.0)
        if sim_stats:
            for key in ("proxy_sample_mean", "proxy_sample_min",
                        "proxy_proxy_mean", "proxy_proxy_max"):
                row[key] = float(np.mean([s[key] for s in sim_stats]))
        rows.append(row)
        per_method_results[method] = results
    return rows, per_method_results


def write_compare_csv(rows, config, path):
    k_list = config["eval.recall_k"]
    columns = ["method", "seeds", "data_checksum"]
    for k in k_list:
        columns += [f"recall@{k}_mean", f"recall@{k}_std"]
    columns += ["proxy_sample_mean", "proxy_sample_min",
                "proxy_proxy_mean", "proxy_proxy_max"]
    with open(path, "w") as fh:
        fh.write(f"# config_hash={config.config_hash()} seed={config.seed}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            rendered = []
            for col in columns:
                value = row.get(col, "")
                if isinstance(value, float):
                    value = format(value, ".17g")
                elif isinstance(value, list):
                    value = ";".join(str(v) for v in value)
                rendered.append(str(value))
            fh.write(",".join(rendered) + "\n")


def sweep_classes(config: ExperimentConfig, class_counts, total_samples, seeds):
    """Fixed-budget sweep: k training classes, floor(total/k) samples each.

    Every k within a seed trains on slices of one pool and is evaluated on
    that pool's unseen test classes. Returns (rows, details); rows carry the
    median recall@1 across seeds per k.
    """
    if config["data.kind"] != "synthetic":
        raise ValueError("class sweeps need the synthetic dataset family")
    class_counts = list(class_counts)
    per_seed = {k: [] for k in class_counts}
    for seed in seeds:
        run_cfg = config.with_updates(seed=seed)
        base_spec = _sweep_spec(run_cfg)
        subsets = fixed_budget_split(base_spec, class_counts, total_samples)
        _, test = make_synthetic(budget_pool_spec(base_spec, class_counts, total_samples))
        for k, subset in zip(class_counts, subsets):
            cfg_k = run_cfg.with_updates(**{"data.train_classes": k})
            result = run_experiment(cfg_k, datasets=(subset, test))
            per_seed[k].append(result.recalls.get(1, float("nan")))
    rows = [
        {
            "k": k,
            "samples_per_class": total_samples // k,
            "recall@1": float(np.median(per_seed[k])),
        }
        for k in class_counts
    ]
    return rows, per_seed


def _sweep_spec(config):
    from .data import SyntheticSpec

    return SyntheticSpec(
        total_classes=config["data.train_classes"] + config["data.test_classes"],
        train_classes=config["data.train_classes"],
        samples_per_class=config["data.samples_per_class"],
        input_dim=config["data.input_dim"],
        cluster_spread=config["data.cluster_spread"],
        min_angle_deg=config["data.min_angle_deg"],
        seed=config.data_seed(),
    )


def write_sweep_csv(rows, config, path):
    with open(path, "w") as fh:
        fh.write(f"# config_hash={config.config_hash()} seed={config.seed}\n")
        fh.write("k,samples_per_class,recall@1\n")
        for row in rows:
            fh.write(
                f"{row['k']},{row['samples_per_class']},"
                f"{format(row['recall@1'], '.17g')}\n"
            )


ANALYSES = ("recall", "kl", "pca")


def analyze_checkpoint(checkpoint_path, analyses, out_dir, dataset_path=None,
                       samples_per_novel_class=40):
    """Run the requested read-only analyses against a saved checkpoint.

    The evaluation split defaults to the one named by the checkpoint's
    embedded config; a feature file can replace it. One CSV per analysis.
    """
    from .checkpoint import load_checkpoint
    from .data import load_feature_file

    unknown = [a for a in analyses if a not in ANALYSES]
    if unknown:
        raise ValueError(
            f"unknown analyses {unknown}; valid names: {', '.join(ANALYSES)}"
        )
    state = load_checkpoint(checkpoint_path)
    config = state.config
    train, test = load_datasets(config)
    if dataset_path is not None:
        test = load_feature_file(dataset_path)
    if test.dim != state.embedder.input_dim:
        raise ValueError(
            f"dataset dim {test.dim} does not match embedder input "
            f"{state.embedder.input_dim}"
        )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = f"# config_hash={config.config_hash()} seed={config.seed}\n"
    written = []

    if "recall" in analyses:
        embedded = embed_dataset(state, test)
        k_list = [k for k in config["eval.recall_k"] if k < test.size]
        recalls = recall_at_k(embedded, k_list)
        path = out_dir / "recall.csv"
        with open(path, "w") as fh:
            fh.write(provenance)
            fh.write("metric,value\n")
            for k in sorted(recalls):
                fh.write(f"recall@{k},{format(recalls[k], '.17g')}\n")
        written.append(path)

    if "kl" in analyses:
        if state.generator is None or state.bank.novel is None:
            raise ValueError(
                "kl analysis compares novel classes against test classes and "
                "needs a checkpoint trained with novel-class augmentation"
            )
        values = kl_rows(state, train, test,
                         samples_per_novel_class=samples_per_novel_class)
        path = out_dir / "kl.csv"
        with open(path, "w") as fh:
            fh.write(provenance)
            fh.write("pair,mean_min_kl\n")
            for pair, value in values:
                fh.write(f"{pair},{format(value, '.17g')}\n")
        written.append(path)

    if "pca" in analyses:
        embedded = embed_dataset(state, test)
        rows = pca_2d(embedded)
        path = out_dir / "pca.csv"
        with open(path, "w") as fh:
            fh.write(provenance)
            fh.write("label,u,v\n")
            for label, u, v in rows:
                fh.write(f"{label},{format(u, '.17g')},{format(v, '.17g')}\n")
        written.append(path)
    return written


def kl_rows(state: TrainState, train: Dataset, test: Dataset,
            samples_per_novel_class=40):
    """Mean minimum KL of train->test and novel->test class Gaussians."""
    train_emb = embed_dataset(state, train)
    test_emb = embed_dataset(state, test)
    train_models = fit_class_models(train_emb.vectors.data, train_emb.labels)
    test_models = fit_class_models(test_emb.vectors.data, test_emb.labels)

    gen = state.generator
    gen.eval()
    rng = np.random.default_rng([state.config.seed, 0x1C11])
    rows, labels = [], []
    with no_grad():
        for label in gen.label_universe():
            noise = Tensor(rng.standard_normal((samples_per_novel_class, gen.noise_dim)))
            rows.append(gen(np.full(samples_per_novel_class, label), noise).data)
            labels.append(np.full(samples_per_novel_class, label))
    gen.train()
    novel_models = fit_class_models(np.concatenate(rows), np.concatenate(labels))

    return [
        ("train_test", kl_alignment(train_models, test_models)),
        ("novel_test", kl_alignment(novel_models, test_models)),
    ]
