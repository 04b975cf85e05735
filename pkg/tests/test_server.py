import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrec.client import PersonalizationWeights
from fedrec.config import default_config
from fedrec.evaluation import evaluate
from fedrec.gnn import GradientUpdate, init_table
from fedrec.rng import substream
from fedrec.server import (
    ClusterAssignment,
    aggregate,
    apply_update,
    build_eval_models,
    cluster_users,
    item_token,
    matcher_key,
    neighborhood_match,
    run_training,
    select_clients,
    user_token,
)
from fedrec.synthetic import two_community_dataset
from fedrec.data import leave_one_out_split


class TestClusterUsers:
    def test_single_cluster_gets_the_mean(self, rng):
        X = rng.normal(size=(12, 3))
        result = cluster_users(X, 1, rng)
        assert set(result.assignment.tolist()) == {0}
        np.testing.assert_allclose(result.centroids[0], X.mean(axis=0), atol=1e-12)

    def test_two_separated_clouds(self, rng):
        a = rng.normal(0.0, 0.1, size=(15, 2))
        b = rng.normal(0.0, 0.1, size=(10, 2)) + 100.0
        X = np.vstack([a, b])
        result = cluster_users(X, 2, rng)
        first = set(result.assignment[:15].tolist())
        second = set(result.assignment[15:].tolist())
        assert len(first) == 1 and len(second) == 1 and first != second

    def test_k_equals_n(self, rng):
        X = rng.normal(size=(6, 2))
        result = cluster_users(X, 6, rng)
        assert sorted(result.assignment.tolist()) == list(range(6))
        if result.inertia_path:
            assert result.inertia_path[-1] == pytest.approx(0.0, abs=1e-18)

    def test_objective_never_increases(self):
        for seed in range(20):
            gen = np.random.default_rng(seed)
            X = gen.normal(size=(40, 3))
            result = cluster_users(X, 4, np.random.default_rng(1000 + seed))
            path = result.inertia_path
            assert all(b <= a + 1e-9 for a, b in zip(path, path[1:]))

    def test_every_cluster_nonempty_even_with_duplicate_points(self):
        X = np.vstack([np.zeros((4, 2)), np.ones((4, 2))])
        result = cluster_users(X, 3, np.random.default_rng(0))
        counts = np.bincount(result.assignment, minlength=3)
        assert (counts > 0).all()

    def test_bad_k_rejected(self, rng):
        with pytest.raises(ValueError):
            cluster_users(rng.normal(size=(3, 2)), 4, rng)


def assignment_of(cluster_sizes):
    labels = np.concatenate(
        [np.full(size, c, dtype=np.int64) for c, size in enumerate(cluster_sizes)]
    )
    centroids = np.zeros((len(cluster_sizes), 2))
    return ClusterAssignment(len(cluster_sizes), labels, centroids)


class TestSelectClients:
    def quota_counts(self, assign, selected):
        return np.bincount(assign.assignment[selected], minlength=assign.k).tolist()

    def test_exact_proportions(self, rng):
        assign = assignment_of([30, 10])
        selected = select_clients(assign, 4, rng)
        assert self.quota_counts(assign, selected) == [3, 1]

    def test_full_budget_selects_everyone(self, rng):
        assign = assignment_of([5, 7])
        assert select_clients(assign, 12, rng) == list(range(12))

    def test_largest_remainder_example(self, rng):
        assign = assignment_of([5, 3, 2])
        selected = select_clients(assign, 5, rng)
        assert self.quota_counts(assign, selected) == [3, 1, 1]

    def test_each_nonempty_cluster_kept_when_budget_allows(self, rng):
        # shares (4.8, 0.1, 0.1): pure largest remainder would zero a cluster
        assign = assignment_of([48, 1, 1])
        selected = select_clients(assign, 5, rng)
        counts = self.quota_counts(assign, selected)
        assert counts[1] >= 1 and counts[2] >= 1
        assert sum(counts) == 5

    def test_selection_is_unique_and_within_clusters(self, rng):
        assign = assignment_of([4, 6, 2])
        selected = select_clients(assign, 7, rng)
        assert len(set(selected)) == 7

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.integers(1, 9), min_size=1, max_size=5),
        st.integers(0, 2**32 - 1),
        st.data(),
    )
    def test_quotas_always_sum_to_the_budget(self, sizes, seed, data):
        assign = assignment_of(sizes)
        n = sum(sizes)
        budget = data.draw(st.integers(1, n))
        selected = select_clients(assign, budget, np.random.default_rng(seed))
        assert len(selected) == budget
        assert len(set(selected)) == budget


def scalar_update(value, count):
    return GradientUpdate({}, {0: np.array([value], dtype=float)}, count)


class TestAggregate:
    def test_weighted_mean(self):
        merged = aggregate([scalar_update(0.0, 1), scalar_update(4.0, 3)])
        assert merged.item_grads[0][0] == pytest.approx(3.0, abs=1e-15)
        assert merged.data_count == 4

    def test_single_update_is_returned_as_is(self, rng):
        upd = GradientUpdate({1: rng.normal(size=3)}, {2: rng.normal(size=3)}, 5)
        merged = aggregate([upd])
        np.testing.assert_allclose(merged.user_grads[1], upd.user_grads[1], atol=1e-15)
        np.testing.assert_allclose(merged.item_grads[2], upd.item_grads[2], atol=1e-15)

    def test_uniform_counts_match_plain_mean_oracle(self, rng):
        updates = [
            GradientUpdate({}, {i: rng.normal(size=4) for i in range(3)}, 7)
            for _ in range(5)
        ]
        merged = aggregate(updates)
        for i in range(3):
            oracle = np.mean([u.item_grads[i] for u in updates], axis=0)
            np.testing.assert_allclose(merged.item_grads[i], oracle, atol=1e-12)

    def test_missing_rows_count_as_zero(self):
        a = GradientUpdate({}, {0: np.array([2.0])}, 1)
        b = GradientUpdate({}, {1: np.array([2.0])}, 1)
        merged = aggregate([a, b])
        assert merged.item_grads[0][0] == pytest.approx(1.0)
        assert merged.item_grads[1][0] == pytest.approx(1.0)

    def test_permutation_invariance(self, rng):
        updates = [
            GradientUpdate({}, {i: rng.normal(size=2) for i in range(4)}, int(d))
            for d in rng.integers(1, 9, size=6)
        ]
        forward = aggregate(updates)
        backward = aggregate(list(reversed(updates)))
        for i in range(4):
            np.testing.assert_allclose(
                forward.item_grads[i], backward.item_grads[i], atol=1e-12
            )

    def test_zero_counts_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            aggregate([scalar_update(1.0, 0), scalar_update(2.0, 0)])


class TestApplyUpdate:
    def test_zero_gradient_changes_nothing(self, rng):
        table = rng.normal(size=(3, 2))
        out = apply_update(table, GradientUpdate({}, {}, 1), 0.5)
        np.testing.assert_array_equal(out, table)

    def test_unit_eta_subtracts_the_row(self, rng):
        table = rng.normal(size=(3, 2))
        grad = rng.normal(size=2)
        out = apply_update(table, GradientUpdate({}, {1: grad}, 1), 1.0)
        np.testing.assert_allclose(out[1], table[1] - grad, atol=1e-15)

    def test_sequential_steps_compose_linearly(self, rng):
        table = rng.normal(size=(4, 2))
        g1 = GradientUpdate({}, {0: rng.normal(size=2)}, 1)
        g2 = GradientUpdate({}, {0: rng.normal(size=2)}, 1)
        combined = GradientUpdate(
            {}, {0: g1.item_grads[0] + g2.item_grads[0]}, 2
        )
        stepwise = apply_update(apply_update(table, g1, 0.3), g2, 0.3)
        at_once = apply_update(table, combined, 0.3)
        np.testing.assert_allclose(stepwise, at_once, atol=1e-12)


class TestNeighborhoodMatch:
    def test_two_clients_sharing_one_item(self):
        key = matcher_key(0)
        token = item_token(7, key)
        uploads = {0: [token], 1: [token]}
        responses = neighborhood_match(uploads, key)
        assert responses[0] == {token: (user_token(1, key),)}
        assert responses[1] == {token: (user_token(0, key),)}

    def test_no_shared_items(self):
        key = matcher_key(0)
        uploads = {0: [item_token(1, key)], 1: [item_token(2, key)]}
        responses = neighborhood_match(uploads, key)
        assert responses == {0: {}, 1: {}}

    def test_three_way_share_counts_two_neighbors_each(self):
        key = matcher_key(0)
        token = item_token(4, key)
        uploads = {c: [token] for c in range(3)}
        responses = neighborhood_match(uploads, key)
        for c in range(3):
            assert len(responses[c][token]) == 2

    def test_raw_ids_never_appear_in_messages(self):
        key = matcher_key(3)
        uploads = {
            c: [item_token(i, key) for i in (c, c + 1, 50)] for c in range(4)
        }
        responses = neighborhood_match(uploads, key)
        payload = json.dumps(
            {str(c): {t: list(v) for t, v in responses[c].items()} for c in responses}
        )
        for raw in list(range(6)) + [50]:
            assert f'"{raw}"' not in payload.replace('"0":', "").replace(
                '"1":', ""
            ).replace('"2":', "").replace('"3":', "")
        for entry in responses.values():
            for token, anon in entry.items():
                assert len(token) == 32 and all(ch in "0123456789abcdef" for ch in token)
                for a in anon:
                    assert len(a) == 32

    def test_tokens_differ_across_keys(self):
        assert item_token(7, matcher_key(0)) != item_token(7, matcher_key(1))


def tiny_config(**overrides):
    cfg = default_config()
    cfg.model.dim = 6
    cfg.model.layers = 2
    cfg.train.max_rounds = 4
    cfg.train.eval_every = 2
    cfg.train.clients_per_round = 24
    cfg.train.eta = 0.5
    cfg.cluster.k = 2
    cfg.pretrain.epochs = 0
    for key, value in overrides.items():
        section, name = key.split(".")
        setattr(getattr(cfg, section), name, value)
    return cfg


@pytest.fixture(scope="module")
def tiny_split():
    return leave_one_out_split(two_community_dataset(24, 16, seed=11, per_user=5))


class TestRunTraining:
    def test_zero_rounds_leave_the_tables_at_the_warm_start(self, tiny_split):
        cfg = tiny_config(**{"train.max_rounds": 0})
        result = run_training(cfg, tiny_split)
        init = init_table(
            tiny_split.n_users, tiny_split.n_items, 6, substream(0, "init")
        )
        np.testing.assert_array_equal(result.global_items, init.items)
        np.testing.assert_array_equal(result.user_table, init.users)
        assert result.reports == []
        assert len(result.assignment.assignment) == tiny_split.n_users

    def test_same_seed_reproduces_reports_and_tables(self, tiny_split):
        a = run_training(tiny_config(), tiny_split)
        b = run_training(tiny_config(), tiny_split)
        assert [r.record() for r in a.reports] == [r.record() for r in b.reports]
        np.testing.assert_array_equal(a.global_items, b.global_items)
        np.testing.assert_array_equal(a.user_table, b.user_table)

    def test_thread_count_does_not_change_results(self, tiny_split):
        a = run_training(tiny_config(**{"train.threads": 1}), tiny_split)
        b = run_training(tiny_config(**{"train.threads": 3}), tiny_split)
        assert [r.record() for r in a.reports] == [r.record() for r in b.reports]
        np.testing.assert_array_equal(a.global_items, b.global_items)
        np.testing.assert_array_equal(a.user_table, b.user_table)

    def test_no_clustering_reports_a_single_cluster(self, tiny_split):
        cfg = tiny_config()
        cfg.ablation.no_clustering = True
        result = run_training(cfg, tiny_split)
        assert all(r.n_clusters == 1 for r in result.reports)
        assert set(result.assignment.assignment.tolist()) == {0}

    def test_global_only_weights_match_bare_global_evaluation(self, tiny_split):
        cfg = tiny_config()
        result = run_training(cfg, tiny_split)
        models = build_eval_models(
            tiny_split,
            result.states,
            result.cluster_items,
            result.assignment,
            result.global_items,
            result.local_base,
            PersonalizationWeights(0.0, 0.0, 1.0),
            cfg,
        )
        # independent bare path: the checkpoint protocol from the CLI module
        from fedrec.cli import _evaluation_models_from_checkpoint

        bare = _evaluation_models_from_checkpoint(
            cfg, tiny_split, result.checkpoint_table()
        )
        for phase in ("validation", "test"):
            ours = evaluate(tiny_split, models, 10, phase)
            theirs = evaluate(tiny_split, bare, 10, phase)
            assert ours.recall == theirs.recall
            assert ours.ndcg == theirs.ndcg

    def test_neighbor_expansion_runs_and_is_deterministic(self, tiny_split):
        cfg = tiny_config()
        cfg.graph.neighbor_expansion = True
        cfg.train.max_rounds = 2
        a = run_training(cfg, tiny_split)
        b = run_training(cfg, tiny_split)
        np.testing.assert_array_equal(a.global_items, b.global_items)
        touched = [s.last_graph for s in a.states.values() if s.last_graph]
        assert any(g.neighbor_users for g in touched)

    def test_early_stopping_restores_the_best_round(self, tiny_split):
        cfg = tiny_config(**{"train.max_rounds": 30, "train.patience": 2})
        result = run_training(cfg, tiny_split)
        evaluated = [r for r in result.reports if r.val_ndcg is not None]
        best = max(evaluated, key=lambda r: r.val_ndcg)
        assert result.final_round == best.round
