"""End-to-end experiment stages: pretrain, supernet training, search,
shortlisting, evaluation, the six-method ablation, and analysis exports.

Every stage derives its randomness from the experiment seed via a fixed
(stage, domain, index) scheme, so stages are independently reproducible and
all methods inside one evaluation consume identical episode streams.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import figures
from .config import ExperimentConfig, provenance_lines
from .episodes import Domain, DomainSpec, Episode, load_dataset, make_domain, sample_episode
from .search import (
    SearchConfig,
    SearchHistory,
    Shortlist,
    TrainConfig,
    adapted_query_accuracy,
    adapted_support_loss,
    evolve,
    finetune_on_support,
    pretrain_backbone,
    read_history_csv,
    read_shortlist,
    select_shortlist,
    supernet_train,
    test_time_select,
    write_history_csv,
    write_shortlist,
)
from .seeding import rng_from
from .supernet import Backbone, PathEncoding, Supernet, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

CORNER_BITS = {
    "corner-frozen": (0, 0),
    "corner-adapt": (1, 0),
    "corner-finetune": (0, 1),
    "corner-both": (1, 1),
}
ABLATION_METHODS = ("corner-frozen", "corner-adapt", "corner-finetune", "corner-both", "nfts1", "nftsN")
EVAL_METHODS = ABLATION_METHODS


class MissingArtifactError(RuntimeError):
    """A stage output is missing; the message names the subcommand to run."""

    def __init__(self, artifact: Path, subcommand: str):
        super().__init__(f"missing {artifact}; run the '{subcommand}' subcommand first")
        self.artifact = artifact
        self.subcommand = subcommand


@dataclass
class ArtifactPaths:
    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    @property
    def backbone(self) -> Path:
        return self.root / "backbone.ckpt"

    @property
    def supernet(self) -> Path:
        return self.root / "supernet.ckpt"

    @property
    def history(self) -> Path:
        return self.root / "history.csv"

    @property
    def shortlist(self) -> Path:
        return self.root / "shortlist.txt"

    def results(self, method: str) -> Path:
        return self.root / f"results_{method}.csv"

    @property
    def ablation_episodes(self) -> Path:
        return self.root / "ablation_episodes.csv"

    @property
    def ablation_report(self) -> Path:
        return self.root / "ablation_report.csv"

    @property
    def correlations(self) -> Path:
        return self.root / "correlations.csv"

    @property
    def snapshots(self) -> Path:
        return self.root / "snapshots.csv"


def artifact_paths(cfg: ExperimentConfig) -> ArtifactPaths:
    return ArtifactPaths(Path(cfg.output_dir))


@dataclass
class EpisodeResult:
    episode_id: int
    domain_id: str
    method: str
    path_bits: str
    support_loss: float
    query_accuracy: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.query_accuracy <= 1.0:
            raise ValueError(f"query_accuracy out of [0, 1]: {self.query_accuracy}")


def corner_path(method: str, k: int) -> PathEncoding:
    adapter, finetune = CORNER_BITS[method]
    return PathEncoding((adapter, finetune) * k)


def build_domains(cfg: ExperimentConfig) -> tuple[list[Domain], list[Domain]]:
    """(training domains, meta-test-only domains); ids and noise are seed-derived."""

    def synth(domain_id: str, scale: float) -> Domain:
        sigma = float(
            rng_from(cfg.seed, "noise", domain_id).uniform(cfg.noise_sigma_min, cfg.noise_sigma_max)
        )
        spec = DomainSpec(
            id=domain_id,
            n_classes=cfg.classes_per_domain,
            d_in=cfg.d_in,
            noise_sigma=sigma,
            transform_scale=scale,
            transform_cond_max=cfg.transform_cond_max,
            split_ratio=cfg.split_ratio,
            n_way_max=cfg.way_max,
        )
        return make_domain(spec, cfg.seed)

    train = [synth(f"seen{i}", cfg.transform_scale) for i in range(cfg.n_train_domains)]
    unseen = [synth(f"unseen{i}", cfg.unseen_transform_scale) for i in range(cfg.n_test_domains)]
    if cfg.dataset_csv:
        unseen.append(load_dataset(cfg.dataset_csv, split_ratio=cfg.split_ratio, seed=cfg.seed))
    return train, unseen


def test_domains(cfg: ExperimentConfig) -> list[Domain]:
    """Meta-test pool: test-label splits of the seen domains plus the unseen domains."""
    train, unseen = build_domains(cfg)
    return train + unseen


def _way_shot(cfg: ExperimentConfig) -> tuple[tuple[int, int], tuple[int, int]]:
    return (cfg.way_min, cfg.way_max), (cfg.shot_min, cfg.shot_max)


def search_config(cfg: ExperimentConfig) -> SearchConfig:
    way, shot = _way_shot(cfg)
    return SearchConfig(
        population_size=cfg.population_size,
        top_m=cfg.top_m,
        mutation_rate=cfg.mutation_rate,
        generations=cfg.generations,
        finetune_epochs=cfg.search_finetune_epochs,
        shortlist_n=cfg.shortlist_n,
        diversity_t=cfg.diversity_t,
        episodes_per_eval=cfg.episodes_per_eval,
        eta1=cfg.ft_eta1,
        eta2=cfg.ft_eta2,
        way_range=way,
        shot_range=shot,
        n_query=cfg.n_query,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------


def run_pretrain(cfg: ExperimentConfig) -> Path:
    paths = artifact_paths(cfg)
    paths.root.mkdir(parents=True, exist_ok=True)
    train, _ = build_domains(cfg)
    way, shot = _way_shot(cfg)
    backbone = Backbone.init_random(
        cfg.d_in, cfg.hidden_dim, cfg.embed_dim, cfg.n_layers, seed=cfg.seed
    )
    pretrain_backbone(
        backbone,
        train,
        episodes_total=cfg.pretrain_episodes,
        lr=cfg.pretrain_lr,
        way_range=way,
        shot_range=shot,
        n_query=cfg.n_query,
        seed=cfg.seed,
    )
    save_checkpoint(backbone, paths.backbone)
    return paths.backbone


def run_train_supernet(cfg: ExperimentConfig) -> Path:
    paths = artifact_paths(cfg)
    if not paths.backbone.exists():
        raise MissingArtifactError(paths.backbone, "pretrain")
    backbone = load_checkpoint(paths.backbone)
    net = Supernet.from_backbone(backbone, adapter_kind=cfg.adapter_kind)
    train, _ = build_domains(cfg)
    way, shot = _way_shot(cfg)
    supernet_train(
        net,
        train,
        TrainConfig(
            episodes_total=cfg.train_episodes,
            eta1=cfg.eta1,
            eta2=cfg.eta2,
            way_range=way,
            shot_range=shot,
            n_query=cfg.n_query,
            seed=cfg.seed,
        ),
    )
    save_checkpoint(net, paths.supernet)
    return paths.supernet


def run_search(cfg: ExperimentConfig) -> Path:
    paths = artifact_paths(cfg)
    if not paths.supernet.exists():
        raise MissingArtifactError(paths.supernet, "train-supernet")
    net = load_checkpoint(paths.supernet)
    train, _ = build_domains(cfg)
    history = evolve(net, train, search_config(cfg))
    write_history_csv(history, paths.history, provenance_lines(cfg))
    return paths.history


def run_shortlist(cfg: ExperimentConfig) -> Path:
    paths = artifact_paths(cfg)
    if not paths.history.exists():
        raise MissingArtifactError(paths.history, "search")
    history = read_history_csv(paths.history)
    shortlist = select_shortlist(history, cfg.shortlist_n, cfg.diversity_t)
    write_shortlist(shortlist, paths.shortlist, provenance_lines(cfg))
    return paths.shortlist


def _load_net_and_shortlist(cfg: ExperimentConfig, need_shortlist: bool) -> tuple[Supernet, Shortlist | None]:
    paths = artifact_paths(cfg)
    if not paths.supernet.exists():
        raise MissingArtifactError(paths.supernet, "train-supernet")
    net = load_checkpoint(paths.supernet)
    shortlist = None
    if need_shortlist:
        if not paths.shortlist.exists():
            raise MissingArtifactError(paths.shortlist, "shortlist")
        shortlist = read_shortlist(paths.shortlist)
    return net, shortlist


def evaluate_method_on_episode(
    net: Supernet,
    method: str,
    episode: Episode,
    cfg: ExperimentConfig,
    shortlist: Shortlist | None,
    episode_id: int,
) -> EpisodeResult:
    if method == "nftsN":
        sel = test_time_select(
            net,
            shortlist.paths,
            episode.support_x,
            episode.support_y,
            cfg.test_finetune_epochs,
            cfg.ft_eta1,
            cfg.ft_eta2,
        )
        path, params, support_loss = sel.path, sel.params, sel.support_loss
    else:
        if method == "nfts1":
            path = shortlist.paths[0]
        elif method in CORNER_BITS:
            path = corner_path(method, net.k)
        else:
            raise ValueError(f"unknown method {method!r}")
        params = finetune_on_support(
            net,
            path,
            episode.support_x,
            episode.support_y,
            cfg.test_finetune_epochs,
            cfg.ft_eta1,
            cfg.ft_eta2,
        )
        support_loss = adapted_support_loss(net, path, episode.support_x, episode.support_y, params)
    accuracy = adapted_query_accuracy(net, path, episode, params)
    return EpisodeResult(
        episode_id=episode_id,
        domain_id=episode.domain_id,
        method=method,
        path_bits=path.bit_string(),
        support_loss=support_loss,
        query_accuracy=accuracy,
    )


def _test_episode(cfg: ExperimentConfig, domain: Domain, index: int) -> Episode:
    way, shot = _way_shot(cfg)
    rng = rng_from(cfg.seed, "eval", domain.id, index)
    return sample_episode(domain, way, shot, cfg.n_query, "test", rng)


def write_results_csv(results: list[EpisodeResult], path, provenance: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        for line in provenance:
            fh.write(f"# {line}\n")
        fh.write("episode_id,domain_id,method,path_bits,support_loss,query_accuracy\n")
        for r in results:
            fh.write(
                f"{r.episode_id},{r.domain_id},{r.method},{r.path_bits},"
                f"{r.support_loss!r},{r.query_accuracy!r}\n"
            )


def read_results_csv(path) -> list[EpisodeResult]:
    results = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("episode_id,"):
                continue
            eid, domain_id, method, bits, loss, acc = line.split(",")
            results.append(
                EpisodeResult(int(eid), domain_id, method, bits, float(loss), float(acc))
            )
    return results


def run_eval(cfg: ExperimentConfig, method: str, episodes_per_domain: int | None = None) -> Path:
    if method not in EVAL_METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {EVAL_METHODS}")
    n_episodes = cfg.test_episodes if episodes_per_domain is None else episodes_per_domain
    net, shortlist = _load_net_and_shortlist(cfg, need_shortlist=method in ("nfts1", "nftsN"))
    results = []
    for domain in test_domains(cfg):
        logger.info("evaluating %s on %s (%d episodes)", method, domain.id, n_episodes)
        for i in range(n_episodes):
            ep = _test_episode(cfg, domain, i)
            results.append(evaluate_method_on_episode(net, method, ep, cfg, shortlist, i))
    paths = artifact_paths(cfg)
    paths.root.mkdir(parents=True, exist_ok=True)
    out = paths.results(method)
    write_results_csv(results, out, provenance_lines(cfg))
    return out


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def confidence_interval(values) -> tuple[float, float]:
    """(mean, 1.96 * sample sd / sqrt(n)); requires at least two values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("confidence interval needs at least 2 values")
    half = 1.96 * values.std(ddof=1) / math.sqrt(values.size)
    return float(values.mean()), float(half)


def ablation_report(
    results: list[EpisodeResult], methods=ABLATION_METHODS
) -> tuple[list[str], list[dict[str, tuple[float, float]]]]:
    """Per-method rows of (mean, ci) per domain plus a pooled 'average' column."""
    domains = sorted({r.domain_id for r in results})
    rows = []
    for method in methods:
        row: dict[str, tuple[float, float]] = {}
        pooled = [r.query_accuracy for r in results if r.method == method]
        for domain in domains:
            vals = [
                r.query_accuracy for r in results if r.method == method and r.domain_id == domain
            ]
            row[domain] = confidence_interval(vals)
        row["average"] = confidence_interval(pooled)
        rows.append(row)
    return domains, rows


def write_ablation_report(results: list[EpisodeResult], path, provenance: list[str]) -> None:
    domains, rows = ablation_report(results)
    with open(path, "w", newline="") as fh:
        for line in provenance:
            fh.write(f"# {line}\n")
        fh.write("method," + ",".join(domains) + ",average\n")
        for method, row in zip(ABLATION_METHODS, rows):
            cells = [f"{row[d][0]:.4f}±{row[d][1]:.4f}" for d in list(domains) + ["average"]]
            fh.write(method + "," + ",".join(cells) + "\n")


def run_ablation(cfg: ExperimentConfig, episodes_per_domain: int | None = None) -> Path:
    """Evaluate the four corners, nfts1 and nftsN on identical episode streams."""
    n_episodes = cfg.test_episodes if episodes_per_domain is None else episodes_per_domain
    net, shortlist = _load_net_and_shortlist(cfg, need_shortlist=True)
    results = []
    for domain in test_domains(cfg):
        logger.info("ablation on %s (%d episodes x %d methods)", domain.id, n_episodes, len(ABLATION_METHODS))
        for i in range(n_episodes):
            ep = _test_episode(cfg, domain, i)
            for method in ABLATION_METHODS:
                results.append(evaluate_method_on_episode(net, method, ep, cfg, shortlist, i))
    paths = artifact_paths(cfg)
    prov = provenance_lines(cfg)
    write_results_csv(results, paths.ablation_episodes, prov)
    write_ablation_report(results, paths.ablation_report, prov)
    _, rows = ablation_report(results)
    figures.save_ablation_figure(
        ABLATION_METHODS,
        [row["average"][0] for row in rows],
        [row["average"][1] for row in rows],
        paths.root / "ablation.png",
    )
    return paths.ablation_report


def point_biserial(history: SearchHistory, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Correlation of each of the 2K decision bits with fitness over the history.

    Returns (correlations, defined); a bit with a constant column (or a
    constant fitness column) gets correlation 0.0 and defined=False.
    """
    records = history.records()
    if not records:
        raise ValueError("history is empty")
    bits = np.asarray([r.path.bits for r in records], dtype=np.float64)
    if bits.shape[1] != 2 * k:
        raise ValueError(f"history paths have {bits.shape[1]} bits, expected {2 * k}")
    fitness = np.asarray([r.fitness for r in records])
    correlations = np.zeros(2 * k)
    defined = np.zeros(2 * k, dtype=bool)
    fit_sd = fitness.std()
    for j in range(2 * k):
        col = bits[:, j]
        if fit_sd == 0.0 or col.std() == 0.0:
            continue
        correlations[j] = float(np.corrcoef(col, fitness)[0, 1])
        defined[j] = True
    return correlations, defined


def write_correlations_csv(
    correlations: np.ndarray, defined: np.ndarray, path, provenance: list[str]
) -> None:
    with open(path, "w", newline="") as fh:
        for line in provenance:
            fh.write(f"# {line}\n")
        fh.write("bit_index,layer,decision,correlation,defined\n")
        for j in range(len(correlations)):
            decision = "adapter" if j % 2 == 0 else "finetune"
            fh.write(f"{j},{j // 2},{decision},{correlations[j]!r},{int(defined[j])}\n")


def run_analyze(cfg: ExperimentConfig) -> Path:
    paths = artifact_paths(cfg)
    if not paths.history.exists():
        raise MissingArtifactError(paths.history, "search")
    history = read_history_csv(paths.history)
    correlations, defined = point_biserial(history, cfg.n_layers)
    write_correlations_csv(correlations, defined, paths.correlations, provenance_lines(cfg))
    figures.save_correlation_figure(correlations, defined, paths.root / "correlations.png")
    return paths.correlations


def export_snapshots(history: SearchHistory, path, provenance: list[str] = ()) -> int:
    """History rows sorted by generation then fitness, for external projection."""
    records = sorted(
        history.records(), key=lambda r: (r.generation, r.fitness, r.path.bit_string())
    )
    with open(path, "w", newline="") as fh:
        for line in provenance:
            fh.write(f"# {line}\n")
        fh.write("generation,path_bits,fitness\n")
        for r in records:
            fh.write(f"{r.generation},{r.path.bit_string()},{r.fitness!r}\n")
    return len(records)


def run_export(cfg: ExperimentConfig) -> Path:
    paths = artifact_paths(cfg)
    if not paths.history.exists():
        raise MissingArtifactError(paths.history, "search")
    history = read_history_csv(paths.history)
    export_snapshots(history, paths.snapshots, provenance_lines(cfg))
    figures.save_history_figure(history.records(), paths.root / "snapshots.png")
    return paths.snapshots


def run_full_pipeline(cfg: ExperimentConfig) -> None:
    """pretrain -> train-supernet -> search -> shortlist, in one call."""
    run_pretrain(cfg)
    run_train_supernet(cfg)
    run_search(cfg)
    run_shortlist(cfg)
