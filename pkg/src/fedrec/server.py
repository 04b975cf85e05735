"""Server-side orchestration: clustering, selection, aggregation, rounds.

The round loop is sequential; client updates within a round are independent
and may run on a thread pool. Every random draw is keyed by (phase, round,
client), so results are identical for any scheduling or thread count.
"""

from __future__ import annotations

import hashlib
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .client import (
    ClientConfig,
    ClientState,
    PersonalizationWeights,
    client_update,
    infer_user_embedding,
    init_client_states,
    local_item_table,
    personalize,
)
from .config import ExperimentConfig, edge_add_count, enabled_ops, pretrain_eta
from .data import SplitDataset
from .errors import DataError, NumericError
from .evaluation import UserEvalModel, evaluate_cutoffs
from .gnn import EmbeddingTable, GradientUpdate, init_table
from .pretrain import AugmentationConfig, assemble_pretraining_graph, pretrain
from .privacy import (
    LdpConfig,
    PrivacyConfig,
    randomize_vector,
    sample_pseudo_items,
)
from .rng import substream


@dataclass(eq=False)
class ClusterAssignment:
    """User-to-cluster mapping plus the centroids that induced it."""

    k: int
    assignment: np.ndarray
    centroids: np.ndarray
    inertia_path: tuple[float, ...] = ()


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding: each next center is drawn with probability
    proportional to its squared distance from the chosen ones."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def cluster_users(
    user_embeddings: np.ndarray, k: int, rng: np.random.Generator
) -> ClusterAssignment:
    """Lloyd iterations until assignments stabilize (at most 100).

    Empty clusters are revived by moving over the point farthest from its
    own centroid, restricted to points whose cluster keeps >= 2 members.
    """
    X = np.asarray(user_embeddings, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n}, got {k}")
    centers = _kmeans_pp(X, k, rng)
    assign = np.full(n, -1, dtype=np.int64)
    inertia_path: list[float] = []
    for _ in range(100):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        counts = np.bincount(new_assign, minlength=k)
        for c in range(k):
            if counts[c] > 0:
                continue
            own_dist = d2[np.arange(n), new_assign].copy()
            own_dist[counts[new_assign] < 2] = -np.inf
            donor = int(own_dist.argmax())
            counts[new_assign[donor]] -= 1
            new_assign[donor] = c
            counts[c] = 1
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            centers[c] = X[assign == c].mean(axis=0)
        inertia_path.append(float(((X - centers[assign]) ** 2).sum()))
    return ClusterAssignment(k, assign, centers, tuple(inertia_path))


def select_clients(
    assign: ClusterAssignment, budget: int, rng: np.random.Generator
) -> list[int]:
    """Cluster-proportional selection.

    Quotas come from largest-remainder apportionment of the budget by cluster
    size (ties to the lower cluster id); when the budget covers them, every
    nonempty cluster keeps at least one slot. Members are then drawn
    uniformly without replacement within each cluster.
    """
    n = len(assign.assignment)
    if not 1 <= budget <= n:
        raise ValueError(f"need 1 <= budget <= {n}, got {budget}")
    sizes = np.bincount(assign.assignment, minlength=assign.k)
    shares = budget * sizes / n
    quotas = np.floor(shares).astype(np.int64)
    remainders = shares - quotas
    leftover = int(budget - quotas.sum())
    order = sorted(range(assign.k), key=lambda c: (-remainders[c], c))
    for c in order[:leftover]:
        quotas[c] += 1
    nonempty = [c for c in range(assign.k) if sizes[c] > 0]
    if budget >= len(nonempty):
        for c in nonempty:
            if quotas[c] > 0:
                continue
            donor = max(
                (x for x in range(assign.k) if quotas[x] >= 2),
                key=lambda x: (quotas[x], -x),
            )
            quotas[donor] -= 1
            quotas[c] += 1
    selected: list[int] = []
    for c in range(assign.k):
        if quotas[c] == 0:
            continue
        members = np.flatnonzero(assign.assignment == c)
        picked = rng.choice(members, size=int(quotas[c]), replace=False)
        selected.extend(int(x) for x in picked)
    return sorted(selected)


def aggregate(updates: Sequence[GradientUpdate]) -> GradientUpdate:
    """Data-count weighted average; rows absent from an update count as zero."""
    if not updates:
        raise ValueError("nothing to aggregate")
    total = sum(u.data_count for u in updates)
    if total <= 0:
        raise ValueError("all data counts are zero")
    users: dict[int, np.ndarray] = {}
    items: dict[int, np.ndarray] = {}
    for upd in updates:
        w = upd.data_count / total
        for uid in sorted(upd.user_grads):
            grad = w * upd.user_grads[uid]
            users[uid] = users[uid] + grad if uid in users else grad
        for iid in sorted(upd.item_grads):
            grad = w * upd.item_grads[iid]
            items[iid] = items[iid] + grad if iid in items else grad
    return GradientUpdate(users, items, total)


def apply_update(
    item_table: np.ndarray, update: GradientUpdate, eta: float
) -> np.ndarray:
    """New item table with eta-scaled gradient rows subtracted."""
    if eta <= 0:
        raise ValueError("eta must be > 0")
    out = item_table.copy()
    for iid in sorted(update.item_grads):
        out[iid] -= eta * update.item_grads[iid]
    return out


def matcher_key(seed: int) -> bytes:
    return hashlib.blake2b(
        f"matcher:{seed}".encode(), digest_size=32, person=b"fedrec-match"
    ).digest()


def item_token(item: int, key: bytes) -> str:
    """Keyed one-way token standing in for an encrypted item id."""
    return hashlib.blake2b(f"i:{item}".encode(), key=key, digest_size=16).hexdigest()


def user_token(user: int, key: bytes) -> str:
    """Anonymous user handle; the key never leaves the simulation."""
    return hashlib.blake2b(f"u:{user}".encode(), key=key, digest_size=16).hexdigest()


def neighborhood_match(
    uploads: Mapping[int, Sequence[str]], key: bytes
) -> dict[int, dict[str, tuple[str, ...]]]:
    """For each client and each uploaded item token, the anonymous tokens of
    the other clients sharing it. Raw ids never appear in the responses."""
    owners: dict[str, list[int]] = defaultdict(list)
    for client in sorted(uploads):
        for token in uploads[client]:
            owners[token].append(client)
    responses: dict[int, dict[str, tuple[str, ...]]] = {}
    for client in sorted(uploads):
        entry: dict[str, tuple[str, ...]] = {}
        for token in uploads[client]:
            others = tuple(user_token(o, key) for o in owners[token] if o != client)
            if others:
                entry[token] = others
        responses[client] = entry
    return responses


@dataclass(eq=False)
class RoundReport:
    round: int
    selected: tuple[int, ...]
    n_clusters: int
    train_loss: float
    val_recall: float | None
    val_ndcg: float | None
    wall_time: float

    def record(self) -> dict:
        # wall_time stays out of the serialized record so reruns are
        # byte-identical
        return {
            "round": self.round,
            "selected": list(self.selected),
            "n_clusters": self.n_clusters,
            "train_loss": self.train_loss,
            "val_recall": self.val_recall,
            "val_ndcg": self.val_ndcg,
        }


@dataclass(eq=False)
class TrainResult:
    global_items: np.ndarray
    user_table: np.ndarray
    cluster_items: dict[int, np.ndarray]
    assignment: ClusterAssignment
    reports: list[RoundReport]
    states: dict[int, ClientState]
    local_base: np.ndarray
    final_round: int

    def checkpoint_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.user_table, self.global_items)


def privacy_settings(cfg: ExperimentConfig) -> PrivacyConfig:
    return PrivacyConfig(
        mask_ratio=cfg.privacy.mask_ratio,
        pseudo_items_p=cfg.privacy.pseudo_items_p,
        ldp=LdpConfig(
            cfg.privacy.clip_delta,
            cfg.privacy.laplace_lambda,
            enabled=cfg.privacy.enabled,
        ),
    )


def augmentation_settings(cfg: ExperimentConfig, n_users: int) -> AugmentationConfig:
    return AugmentationConfig(
        node_keep_prob=cfg.pretrain.node_keep_prob,
        edge_add_count=edge_add_count(cfg, n_users),
        noise_magnitude=cfg.pretrain.noise_magnitude,
        temperature=cfg.pretrain.tau,
        enabled_ops=enabled_ops(cfg),
    )


def warm_start_table(cfg: ExperimentConfig, split: SplitDataset) -> EmbeddingTable:
    """Seeded random init, contrastively pre-trained unless disabled."""
    table = init_table(
        split.n_users, split.n_items, cfg.model.dim, substream(cfg.train.seed, "init")
    )
    if cfg.ablation.no_pretrain or cfg.pretrain.epochs == 0:
        return table
    graph = assemble_pretraining_graph(
        split,
        privacy_settings(cfg),
        cfg.train.seed,
        use_true_edges=cfg.pretrain.use_true_graph,
    )
    result = pretrain(
        graph,
        table,
        cfg.pretrain.epochs,
        augmentation_settings(cfg, split.n_users),
        pretrain_eta(cfg),
        cfg.model.layers,
        substream(cfg.train.seed, "pretrain"),
    )
    if not result.table.allfinite():
        raise NumericError("non-finite embeddings after pre-training")
    return result.table


def _clustering_inputs(
    states: dict[int, ClientState], cfg: ExperimentConfig, round_idx: int
) -> np.ndarray:
    rows = []
    noised = cfg.privacy.enabled and cfg.cluster.noised_upload
    ldp = LdpConfig(
        cfg.privacy.clip_delta, cfg.privacy.laplace_lambda, enabled=True
    )
    for user in range(len(states)):
        vec = states[user].last_inferred
        if noised:
            vec = randomize_vector(
                vec, ldp, substream(cfg.train.seed, "cluster-upload", round_idx, user)
            )
        rows.append(vec)
    return np.vstack(rows)


def _neighbor_setup(cfg: ExperimentConfig, split: SplitDataset):
    """One-hop expansion inputs: per-user (token, item) pairs from the
    keyed matcher. Clients decode tokens for their own items only."""
    key = matcher_key(cfg.train.seed)
    uploads = {
        u: [item_token(i, key) for i in sorted(split.train[u])]
        for u in sorted(split.train)
    }
    responses = neighborhood_match(uploads, key)
    neighbors: dict[int, tuple[tuple[str, int], ...]] = {}
    for user in sorted(split.train):
        own_tokens = {item_token(i, key): i for i in sorted(split.train[user])}
        pairs = []
        for token, anon_users in responses[user].items():
            item = own_tokens[token]
            pairs.extend((anon, item) for anon in anon_users)
        neighbors[user] = tuple(sorted(pairs))
    return neighbors


def _neighbor_vec_snapshot(
    cfg: ExperimentConfig,
    states: dict[int, ClientState],
    round_idx: int,
) -> dict[str, np.ndarray]:
    """Anonymous-token -> uploaded user embedding, LDP-noised when enabled."""
    key = matcher_key(cfg.train.seed)
    snapshot = {}
    noised = cfg.privacy.enabled
    ldp = LdpConfig(cfg.privacy.clip_delta, cfg.privacy.laplace_lambda, enabled=True)
    for user in range(len(states)):
        vec = states[user].last_inferred
        if noised:
            vec = randomize_vector(
                vec,
                ldp,
                substream(cfg.train.seed, "neighbor-upload", round_idx, user),
            )
        snapshot[user_token(user, key)] = vec
    return snapshot


def build_eval_models(
    split: SplitDataset,
    states: dict[int, ClientState],
    cluster_items: dict[int, np.ndarray],
    assignment: ClusterAssignment,
    global_items: np.ndarray,
    local_base: np.ndarray,
    weights: PersonalizationWeights,
    cfg: ExperimentConfig,
    threads: int = 1,
) -> dict[int, UserEvalModel]:
    """Personalized per-user models for the ranking protocol.

    The evaluation-time local graph draws pseudo items from a fixed per-user
    stream (round-independent); candidates exclude the full training set plus
    those pseudo items. Item scores use the mixed raw rows: every candidate
    is isolated in the local graph, so propagation would only rescale them
    uniformly.
    """
    privacy = privacy_settings(cfg)

    def build_one(user: int) -> tuple[int, UserEvalModel]:
        state = states[user]
        train_items = split.train[user]
        pseudo = sample_pseudo_items(
            split.n_items,
            train_items,
            privacy.pseudo_items_p,
            substream(cfg.train.seed, "eval-graph", user),
        )
        mixed = personalize(
            local_item_table(state, local_base),
            cluster_items[int(assignment.assignment[user])],
            global_items,
            weights,
            state.user_vec,
        )
        user_emb = infer_user_embedding(
            mixed.user_row,
            mixed.item_rows,
            sorted(train_items | pseudo),
            cfg.model.layers,
        )
        return user, UserEvalModel(user_emb, mixed.item_rows, train_items | pseudo)

    users = sorted(split.train)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            built = dict(pool.map(build_one, users))
    else:
        built = dict(build_one(u) for u in users)
    return built


def eval_weights(cfg: ExperimentConfig) -> PersonalizationWeights:
    if cfg.ablation.no_personalization:
        return PersonalizationWeights(0.0, 0.0, 1.0)
    a1, a2, a3 = cfg.personalization.alpha
    return PersonalizationWeights(a1, a2, a3)


def run_training(
    cfg: ExperimentConfig,
    split: SplitDataset,
    warm_table: EmbeddingTable | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Full federated loop.

    Per round: (re)cluster on uploaded embeddings, select clients in
    proportion to cluster sizes, collect privacy-protected client updates,
    apply the weighted-average step to the global table and to each cluster
    table, and periodically evaluate the personalized models on validation
    data with early stopping on NDCG@20. The best-validation snapshot is
    restored at the end.
    """
    seed = cfg.train.seed
    n_users = split.n_users
    if warm_table is not None:
        if warm_table.n_users != n_users or warm_table.n_items != split.n_items:
            raise DataError("warm-start table shape does not match the dataset")
        table = warm_table.copy()
    else:
        table = warm_start_table(cfg, split)
    states = init_client_states(table)
    global_items = table.items.copy()
    local_base = table.items.copy()

    k_clusters = 1 if cfg.ablation.no_clustering else min(cfg.cluster.k, n_users)
    budget = min(cfg.train.clients_per_round, n_users)
    weights = eval_weights(cfg)
    es_cutoff = 20 if 20 in cfg.eval.cutoffs else max(cfg.eval.cutoffs)
    threads = cfg.train.threads

    neighbors: dict[int, tuple[tuple[str, int], ...]] = {}
    if cfg.graph.neighbor_expansion:
        neighbors = _neighbor_setup(cfg, split)

    privacy = privacy_settings(cfg)
    assignment: ClusterAssignment | None = None
    cluster_items: dict[int, np.ndarray] = {}
    reports: list[RoundReport] = []
    best_snapshot = None
    best_ndcg = -np.inf
    best_round = 0
    evals_since_best = 0

    def make_assignment(round_idx: int) -> ClusterAssignment:
        embeddings = _clustering_inputs(states, cfg, round_idx)
        if k_clusters == 1:
            return ClusterAssignment(
                1,
                np.zeros(n_users, dtype=np.int64),
                embeddings.mean(axis=0, keepdims=True),
            )
        return cluster_users(
            embeddings, k_clusters, substream(seed, "cluster", round_idx)
        )

    for round_idx in range(1, cfg.train.max_rounds + 1):
        started = time.perf_counter()
        if assignment is None or (round_idx - 1) % cfg.cluster.recluster_every == 0:
            assignment = make_assignment(round_idx)
            # cluster tables restart from the current global table: cluster
            # identities do not persist across re-clusterings
            cluster_items = {c: global_items.copy() for c in range(k_clusters)}
        selected = select_clients(assignment, budget, substream(seed, "select", round_idx))

        ctx = ClientConfig(
            split=split,
            n_layers=cfg.model.layers,
            eta=cfg.train.eta,
            gamma=cfg.train.gamma,
            batch_size=cfg.train.batch_size,
            privacy=privacy,
            local_base=local_base,
            neighbors=neighbors,
            neighbor_vecs=(
                _neighbor_vec_snapshot(cfg, states, round_idx)
                if cfg.graph.neighbor_expansion
                else {}
            ),
        )

        def run_one(user: int) -> tuple[int, GradientUpdate]:
            return user, client_update(
                states[user], global_items, ctx, substream(seed, "client", round_idx, user)
            )

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                updates = dict(pool.map(run_one, selected))
        else:
            updates = dict(run_one(u) for u in selected)

        ordered = [updates[u] for u in selected]
        global_items = apply_update(global_items, aggregate(ordered), cfg.train.eta)
        by_cluster: dict[int, list[GradientUpdate]] = defaultdict(list)
        for user in selected:
            by_cluster[int(assignment.assignment[user])].append(updates[user])
        for c in sorted(by_cluster):
            cluster_items[c] = apply_update(
                cluster_items[c], aggregate(by_cluster[c]), cfg.train.eta
            )
        if not np.isfinite(global_items).all():
            raise NumericError(f"non-finite global table after round {round_idx}")

        train_loss = float(np.mean([states[u].last_loss for u in selected]))
        val_recall = val_ndcg = None
        if round_idx % cfg.train.eval_every == 0:
            models = build_eval_models(
                split,
                states,
                cluster_items,
                assignment,
                global_items,
                local_base,
                weights,
                cfg,
                threads=threads,
            )
            result = evaluate_cutoffs(split, models, (es_cutoff,), "validation")[
                es_cutoff
            ]
            val_recall, val_ndcg = result.recall, result.ndcg
            if val_ndcg > best_ndcg:
                best_ndcg = val_ndcg
                best_round = round_idx
                evals_since_best = 0
                best_snapshot = (
                    global_items.copy(),
                    {c: t.copy() for c, t in cluster_items.items()},
                    ClusterAssignment(
                        assignment.k,
                        assignment.assignment.copy(),
                        assignment.centroids.copy(),
                    ),
                    {
                        u: ClientState(
                            u,
                            s.user_vec.copy(),
                            {i: v.copy() for i, v in s.local_rows.items()},
                            None if s.last_inferred is None else s.last_inferred.copy(),
                            s.last_loss,
                            s.last_graph,
                        )
                        for u, s in states.items()
                    },
                )
            else:
                evals_since_best += 1

        reports.append(
            RoundReport(
                round=round_idx,
                selected=tuple(selected),
                n_clusters=k_clusters,
                train_loss=train_loss,
                val_recall=val_recall,
                val_ndcg=val_ndcg,
                wall_time=time.perf_counter() - started,
            )
        )
        if verbose and (val_ndcg is not None or round_idx == 1):
            note = "" if val_ndcg is None else f"  val ndcg@{es_cutoff} {val_ndcg:.4f}"
            print(f"round {round_idx:4d}  loss {train_loss:.4f}{note}")
        if evals_since_best >= cfg.train.patience:
            break

    if assignment is None:
        assignment = make_assignment(0)
        cluster_items = {c: global_items.copy() for c in range(k_clusters)}
    final_round = len(reports)
    if best_snapshot is not None:
        global_items, cluster_items, assignment, states = best_snapshot
        final_round = best_round

    user_table = np.vstack([states[u].user_vec for u in range(n_users)])
    return TrainResult(
        global_items=global_items,
        user_table=user_table,
        cluster_items=cluster_items,
        assignment=assignment,
        reports=reports,
        states=states,
        local_base=local_base,
        final_round=final_round,
    )
