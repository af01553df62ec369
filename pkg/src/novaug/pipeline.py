"""Three-stage training: embedder pretraining, generator pretraining, joint.

Stage one fits the embedding network and real proxies alone. Stage two
freezes the embedder and teaches the generator (plus novel proxies when they
exist) to produce discriminative, realistic vectors. Stage three optimizes
everything on the union loss plus the weighted divergence, whose gradient is
blocked on the real side.

Methods share this skeleton: `vanilla` skips both generator stages, `ps`
replaces the generator with per-step pair interpolation, `l2a_ec` conditions
the generator on existing classes, `l2a_nc` on novel ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import recall_at_k
from .config import ExperimentConfig
from .data import Dataset, SyntheticSpec, load_feature_file, make_synthetic
from .layers import EmbeddingNet
from .losses import EmbeddingBatch, ProxyBank, j_met, union_batch
from .optim import AdamW
from .ot import energy_distance
from .synthesis import ConditionalGenerator, PSParams, generate, ps_synthesize_batch
from .tensor import Tensor, backward, concat_rows, no_grad

STAGES = ("pretrain_f", "pretrain_g", "joint")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborted with diagnostics."""


@dataclass
class MetricRow:
    step: int
    stage: str
    j_met: float
    j_div: float | None
    total: float

    def as_csv(self):
        j_div = "" if self.j_div is None else format(self.j_div, ".17g")
        return (
            f"{self.step},{self.stage},{format(self.j_met, '.17g')},"
            f"{j_div},{format(self.total, '.17g')}"
        )


@dataclass
class TrainState:
    config: ExperimentConfig
    embedder: EmbeddingNet
    bank: ProxyBank
    generator: ConditionalGenerator | None
    rngs: dict
    num_real_classes: int
    stage: str = "pretrain_f"
    step_in_stage: int = 0
    global_step: int = 0
    opt_f: AdamW | None = None
    opt_g: AdamW | None = None
    metric_rows: list = field(default_factory=list)

    @property
    def method(self):
        return self.config.method

    def f_group(self):
        return self.embedder.parameters() + [self.bank.real]

    def g_group(self):
        if self.generator is None:
            return []
        params = self.generator.parameters()
        if self.bank.novel is not None:
            params = params + [self.bank.novel]
        return params


def _spawn_rngs(seed):
    streams = np.random.SeedSequence(seed).spawn(5)
    names = ("init", "batch", "noise", "div", "ps")
    return {name: np.random.default_rng(s) for name, s in zip(names, streams)}


def build_state(config: ExperimentConfig, num_real_classes, input_dim) -> TrainState:
    rngs = _spawn_rngs(config.seed)
    init = rngs["init"]
    embedder = EmbeddingNet(
        input_dim,
        config["model.trunk_hidden"],
        config["model.embedding_dim"],
        init,
    )
    method = config.method
    num_novel = config.novel_count(num_real_classes)
    bank = ProxyBank.initialize(
        num_real_classes,
        num_novel if method == "l2a_nc" else 0,
        config["model.embedding_dim"],
        init,
    )
    generator = None
    if method == "l2a_nc" and num_novel > 0:
        generator = ConditionalGenerator(
            num_novel,
            first_label=num_real_classes + 1,
            output_dim=config["model.embedding_dim"],
            rng=init,
            noise_dim=config["model.noise_dim"],
            hidden_dim=config.generator_hidden(),
        )
    elif method == "l2a_ec":
        generator = ConditionalGenerator(
            num_real_classes,
            first_label=1,
            output_dim=config["model.embedding_dim"],
            rng=init,
            noise_dim=config["model.noise_dim"],
            hidden_dim=config.generator_hidden(),
        )
    return TrainState(
        config=config,
        embedder=embedder,
        bank=bank,
        generator=generator,
        rngs=rngs,
        num_real_classes=num_real_classes,
    )


def enter_stage(state: TrainState, stage: str):
    """Move to a stage and build its fresh optimizers (moments reset)."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    config = state.config
    wd = config["train.weight_decay"]
    state.stage = stage
    state.step_in_stage = 0
    state.opt_f = None
    state.opt_g = None
    if stage == "pretrain_f":
        state.opt_f = AdamW(state.f_group(), lr=config["train.lr_pretrain_f"],
                            weight_decay=wd)
    elif stage == "pretrain_g":
        if state.generator is None:
            raise ValueError(f"method {state.method} has no generator stage")
        state.opt_g = AdamW(state.g_group(), lr=config["train.lr_pretrain_g"],
                            weight_decay=wd)
    else:
        state.opt_f = AdamW(state.f_group(), lr=config["train.lr_joint_f"],
                            weight_decay=wd)
        if state.generator is not None:
            state.opt_g = AdamW(state.g_group(), lr=config["train.lr_joint_g"],
                                weight_decay=wd)


def _sample_batch(data: Dataset, size, rng):
    idx = rng.choice(data.size, size=size, replace=data.size < size)
    return data.features[idx], data.labels[idx]


def _check_finite(state, value, what):
    if not np.isfinite(value):
        raise TrainingDiverged(
            f"{what} became {value} at step {state.global_step} "
            f"(stage {state.stage}, method {state.method})"
        )


def _log(state, j_met_value, j_div_value, total):
    state.metric_rows.append(
        MetricRow(state.global_step, state.stage, j_met_value, j_div_value, total)
    )
    state.step_in_stage += 1
    state.global_step += 1


def _synthetic_labels(state, count):
    gen = state.generator
    return state.rngs["noise"].integers(
        gen.first_label, gen.first_label + gen.num_classes, size=count
    )


def _generate_batch(state, count):
    labels = _synthetic_labels(state, count)
    noise = Tensor(state.rngs["noise"].standard_normal((count, state.generator.noise_dim)))
    return generate(state.generator, labels, noise)


def pretrain_embedder(state: TrainState, data: Dataset):
    """Stage one: fit embedder and real proxies on the metric loss alone."""
    if state.stage != "pretrain_f" or state.opt_f is None:
        enter_stage(state, "pretrain_f")
    config = state.config
    params = config.loss_params()
    state.embedder.train()
    while state.step_in_stage < config["train.pretrain_f_steps"]:
        features, labels = _sample_batch(data, config["train.batch_size"],
                                         state.rngs["batch"])
        state.opt_f.zero_grad()
        emb = EmbeddingBatch(state.embedder(Tensor(features)), labels)
        loss = j_met(emb, state.bank.real_only(), params)
        value = loss.item()
        _check_finite(state, value, "metric loss")
        backward(loss)
        state.opt_f.step()
        _log(state, value, None, value)
    return state


def pretrain_generator(state: TrainState, data: Dataset):
    """Stage two: teach the generator with the embedder frozen.

    The metric term deliberately excludes real embeddings here; they enter
    only through the divergence, which never back-propagates into them. For
    existing-class conditioning the real proxies serve as (frozen) targets.
    """
    if state.generator is None:
        raise ValueError(f"method {state.method} has no generator to pretrain")
    if state.stage != "pretrain_g" or state.opt_g is None:
        enter_stage(state, "pretrain_g")
    config = state.config
    params = config.loss_params()
    lam = config["lambda_div"]
    ot_params = config.sinkhorn_params()
    m = config.synthetic_batch_size()
    state.embedder.eval()
    state.generator.train()
    f_before = _parameter_checksum(state.embedder)
    while state.step_in_stage < config["train.pretrain_g_steps"]:
        state.opt_g.zero_grad()
        synth = _generate_batch(state, m)
        if state.bank.novel is not None:
            proxies = state.bank.novel_only()
        else:
            real, labels = state.bank.real_only()
            proxies = (real.detach(), labels)
        loss = j_met(synth, proxies, params)
        jm_value = loss.item()
        jd_value = None
        if lam > 0:
            features, _ = _sample_batch(data, config["train.batch_size"],
                                        state.rngs["batch"])
            with no_grad():
                real_emb = state.embedder(Tensor(features))
            jd = energy_distance(real_emb, synth.vectors, ot_params,
                                 state.rngs["div"])
            jd_value = jd.item()
            loss = loss + lam * jd
        total = loss.item()
        _check_finite(state, total, "total loss")
        backward(loss)
        state.opt_g.step()
        _log(state, jm_value, jd_value, total)
    assert _parameter_checksum(state.embedder) == f_before, "embedder moved in stage two"
    state.embedder.train()
    return state


def joint_step(state: TrainState, data: Dataset, batch=None):
    """One stage-three step over all parameter groups.

    The divergence gradient reaches only the generator: the real batch enters
    it as a detached constant inside ``energy_distance``.
    """
    if state.stage != "joint" or state.opt_f is None:
        enter_stage(state, "joint")
    config = state.config
    params = config.loss_params()
    lam = config["lambda_div"]
    state.embedder.train()
    if state.generator is not None:
        state.generator.train()

    if batch is None:
        batch = _sample_batch(data, config["train.batch_size"], state.rngs["batch"])
    features, labels = batch
    state.opt_f.zero_grad()
    if state.opt_g is not None:
        state.opt_g.zero_grad()

    real = EmbeddingBatch(state.embedder(Tensor(features)), labels)
    jd_value = None
    if state.generator is not None:
        synth = _generate_batch(state, config.synthetic_batch_size())
        merged = union_batch(real, synth, allow_overlap=state.method == "l2a_ec")
        proxies = state.bank.all() if state.bank.novel is not None else state.bank.real_only()
        loss = j_met(merged, proxies, params)
        jm_value = loss.item()
        if lam > 0:
            jd = energy_distance(real.vectors, synth.vectors, config.sinkhorn_params(),
                                 state.rngs["div"])
            jd_value = jd.item()
            loss = loss + lam * jd
    elif state.method == "ps":
        loss, jm_value = _ps_loss(state, real, params)
    else:
        loss = j_met(real, state.bank.real_only(), params)
        jm_value = loss.item()

    total = loss.item()
    _check_finite(state, total, "total loss")
    backward(loss)
    state.opt_f.step()
    if state.opt_g is not None:
        state.opt_g.step()
    _log(state, jm_value, jd_value, total)
    return state


def _ps_loss(state, real: EmbeddingBatch, params):
    config = state.config
    max_pairs = max(config.novel_count(state.num_real_classes), 1)
    result = ps_synthesize_batch(
        real,
        state.bank.real,
        PSParams(alpha=config["ps.alpha"]),
        state.rngs["ps"],
        max_pairs=max_pairs,
        first_new_label=state.num_real_classes + 1,
    )
    if result is None:
        loss = j_met(real, state.bank.real_only(), params)
        return loss, loss.item()
    synth, p_tilde, new_labels = result
    merged = union_batch(real, synth)
    real_proxies, real_labels = state.bank.real_only()
    proxies = concat_rows([real_proxies, p_tilde])
    labels = np.concatenate([real_labels, new_labels])
    loss = j_met(merged, (proxies, labels), params)
    return loss, loss.item()


def run_joint(state: TrainState, data: Dataset):
    if state.stage != "joint" or state.opt_f is None:
        enter_stage(state, "joint")
    while state.step_in_stage < state.config["train.joint_steps"]:
        joint_step(state, data)
    return state


def _parameter_checksum(module):
    import hashlib

    digest = hashlib.sha256()
    for name, p in module.named_parameters():
        digest.update(name.encode())
        digest.update(p.data.tobytes())
    return digest.hexdigest()


def embed_dataset(state: TrainState, data: Dataset, batch_size=512) -> EmbeddingBatch:
    """Eval-mode embeddings of a whole dataset (no graph recorded)."""
    state.embedder.eval()
    chunks = []
    with no_grad():
        for start in range(0, data.size, batch_size):
            chunk = state.embedder(Tensor(data.features[start : start + batch_size]))
            chunks.append(chunk.data)
    state.embedder.train()
    return EmbeddingBatch(Tensor(np.concatenate(chunks)), data.labels)


def count_parameters(state: TrainState):
    """Exact per-component parameter counts plus the augmentation overhead."""
    trunk = state.embedder.trunk_parameter_count()
    head = state.embedder.head_parameter_count()
    generator = 0 if state.generator is None else state.generator.num_parameters()
    real_proxies = state.bank.real.data.size
    novel_proxies = 0 if state.bank.novel is None else state.bank.novel.data.size
    base = trunk + head + real_proxies
    overhead = generator + novel_proxies
    return {
        "trunk": trunk,
        "embedding_head": head,
        "generator": generator,
        "proxies_real": real_proxies,
        "proxies_novel": novel_proxies,
        "total": base + overhead,
        "overhead_pct": 100.0 * overhead / base,
    }


def load_datasets(config: ExperimentConfig):
    if config["data.kind"] == "feature_file":
        return (
            load_feature_file(config["data.train_path"]),
            load_feature_file(config["data.test_path"]),
        )
    spec = SyntheticSpec(
        total_classes=config["data.train_classes"] + config["data.test_classes"],
        train_classes=config["data.train_classes"],
        samples_per_class=config["data.samples_per_class"],
        input_dim=config["data.input_dim"],
        cluster_spread=config["data.cluster_spread"],
        min_angle_deg=config["data.min_angle_deg"],
        seed=config.data_seed(),
    )
    return make_synthetic(spec)


@dataclass
class RunResult:
    config: ExperimentConfig
    state: TrainState
    train: Dataset
    test: Dataset
    recalls: dict
    run_dir: object = None

    @property
    def metric_rows(self):
        return self.state.metric_rows


def _validate_train_labels(train: Dataset):
    classes = train.class_labels()
    if classes.size == 0 or not np.array_equal(classes, np.arange(1, classes.size + 1)):
        raise ValueError("train labels must be contiguous integers starting at 1")
    return classes.size


def run_experiment(config: ExperimentConfig, out_dir=None, datasets=None) -> RunResult:
    """Execute all stages for the configured method, then evaluate unseen classes.

    Writes metrics.csv, eval.csv, config.echo and checkpoint.bin into
    ``out_dir`` when given. ``datasets`` overrides the configured data source
    (used by sweeps to pair runs on one dataset).
    """
    train, test = datasets if datasets is not None else load_datasets(config)
    num_classes = _validate_train_labels(train)
    state = build_state(config, num_classes, train.dim)

    pretrain_embedder(state, train)
    if state.generator is not None and config["train.pretrain_g_steps"] > 0:
        pretrain_generator(state, train)
    run_joint(state, train)

    embedded = embed_dataset(state, test)
    k_list = [k for k in config["eval.recall_k"] if k < test.size]
    recalls = recall_at_k(embedded, k_list)

    result = RunResult(config, state, train, test, recalls, run_dir=out_dir)
    if out_dir is not None:
        _write_artifacts(result, out_dir)
    return result


def _provenance(config):
    return f"# config_hash={config.config_hash()} seed={config.seed}\n"


def write_metrics_csv(result: RunResult, path):
    with open(path, "w") as fh:
        fh.write(_provenance(result.config))
        fh.write("step,stage,j_met,j_div,total\n")
        for row in result.metric_rows:
            fh.write(row.as_csv() + "\n")


def write_eval_csv(result: RunResult, path):
    with open(path, "w") as fh:
        fh.write(_provenance(result.config))
        fh.write("metric,value\n")
        for k in sorted(result.recalls):
            fh.write(f"recall@{k},{format(result.recalls[k], '.17g')}\n")


def _write_artifacts(result: RunResult, out_dir):
    from pathlib import Path

    from .checkpoint import save_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result, out / "metrics.csv")
    write_eval_csv(result, out / "eval.csv")
    (out / "config.echo").write_text(result.config.canonical_text())
    save_checkpoint(result.state, out / "checkpoint.bin")
    if result.config["ot.debug_dump"]:
        _dump_final_plan(result, out)


def _dump_final_plan(result: RunResult, out):
    from .ot import cosine_cost, sinkhorn

    state = result.state
    if state.generator is None:
        return
    config = result.config
    features, _ = _sample_batch(result.train, config["train.batch_size"],
                                np.random.default_rng(config.seed))
    with no_grad():
        state.embedder.eval()
        real = state.embedder(Tensor(features))
        state.generator.eval()
        synth = _generate_batch(state, config.synthetic_batch_size())
        _, plan = sinkhorn(cosine_cost(real, synth.vectors), config.sinkhorn_params())
    plan.write_csv(out / "transport_plan.csv")
    state.embedder.train()
