import math

import numpy as np
import pytest

from fedrec.client import (
    ClientConfig,
    ClientState,
    PersonalizationWeights,
    client_update,
    infer_user_embedding,
    init_client_states,
    local_item_table,
    personalize,
    sample_bpr_triples,
)
from fedrec.data import (
    ClientGraph,
    Interaction,
    InteractionDataset,
    build_client_graph,
    leave_one_out_split,
)
from fedrec.errors import DataError
from fedrec.gnn import (
    EmbeddingTable,
    PropagationOperator,
    bpr_gradients,
)
from fedrec.privacy import PrivacyConfig
from fedrec.rng import substream


def graph_of(true_items, n_items, pseudo=frozenset(), masked=frozenset()):
    return ClientGraph(
        user=0,
        n_items=n_items,
        true_items=frozenset(true_items),
        pseudo_items=frozenset(pseudo),
        masked_items=frozenset(masked),
    )


class TestSampleBprTriples:
    def test_single_positive(self, rng):
        triples = sample_bpr_triples(graph_of({0}, 3), 20, rng)
        assert all(t.pos_item == 0 for t in triples)
        assert all(t.neg_item in {1, 2} for t in triples)
        assert all(t.user == 0 for t in triples)

    def test_full_catalog_has_no_negatives(self, rng):
        with pytest.raises(DataError, match="negative"):
            sample_bpr_triples(graph_of({0, 1, 2}, 3), 4, rng)

    def test_positive_frequencies_are_uniform(self):
        triples = sample_bpr_triples(
            graph_of({0, 1}, 10), 10_000, substream(3, "triples")
        )
        freq = np.mean([t.pos_item == 0 for t in triples])
        assert abs(freq - 0.5) <= 0.02

    def test_negatives_avoid_pseudo_and_masked(self, rng):
        cg = graph_of({0}, 6, pseudo={1, 2}, masked={3})
        triples = sample_bpr_triples(cg, 200, rng)
        assert {t.neg_item for t in triples} <= {4, 5}


def make_split(n_items=8):
    rows = tuple(Interaction(0, i, i) for i in range(5))
    return leave_one_out_split(InteractionDataset(1, n_items, rows))


def make_cfg(split, items, **kwargs):
    defaults = dict(
        split=split,
        n_layers=0,
        eta=0.1,
        gamma=0.0,
        batch_size=1,
        privacy=PrivacyConfig(),
        local_base=items,
    )
    defaults.update(kwargs)
    return ClientConfig(**defaults)


class TestClientUpdate:
    def test_closed_form_single_triple_zero_layers(self):
        split = make_split()
        items = np.arange(16, dtype=float).reshape(8, 2) / 10.0
        state = ClientState(0, np.array([0.3, -0.2]), last_inferred=np.zeros(2))
        user_before = state.user_vec.copy()
        cfg = make_cfg(split, items)
        stream = substream(1, "client", 1, 0)
        update = client_update(state, items, cfg, stream)

        # replay the draws: no mask/pseudo draws when privacy is off
        replay = substream(1, "client", 1, 0)
        cg = build_client_graph(split, 0, cfg.privacy, replay)
        triples = sample_bpr_triples(cg, 1, replay)
        (t,) = triples
        margin = float(user_before @ (items[t.pos_item] - items[t.neg_item]))
        coef = 1.0 / (1.0 + math.exp(-margin)) - 1.0
        assert set(update.item_grads) == {t.pos_item, t.neg_item}
        np.testing.assert_allclose(
            update.item_grads[t.pos_item], coef * user_before, atol=1e-12
        )
        np.testing.assert_allclose(
            update.item_grads[t.neg_item], -coef * user_before, atol=1e-12
        )
        assert update.user_grads == {}
        assert update.data_count == 3
        # the user step was applied locally
        expected_user = user_before - cfg.eta * coef * (
            items[t.pos_item] - items[t.neg_item]
        )
        np.testing.assert_allclose(state.user_vec, expected_user, atol=1e-12)

    def test_pseudo_items_extend_the_gradient_support(self):
        split = make_split(n_items=12)
        items = substream(0, "items").normal(size=(12, 3))
        state = ClientState(0, np.array([0.5, 0.1, -0.4]))
        cfg = make_cfg(
            split,
            items,
            privacy=PrivacyConfig(pseudo_items_p=2),
            n_layers=1,
            batch_size=4,
        )
        update = client_update(state, items, cfg, substream(9, "c", 1, 0))
        replay = substream(9, "c", 1, 0)
        cg = build_client_graph(split, 0, cfg.privacy, replay)
        triples = sample_bpr_triples(cg, 4, replay)
        pseudo = state.last_graph.pseudo_items
        assert pseudo == cg.pseudo_items and len(pseudo) == 2
        assert pseudo <= set(update.item_grads)
        # decoys plus sampled negatives are the only rows outside the train set
        outside = set(update.item_grads) - split.train[0]
        assert outside == pseudo | {t.neg_item for t in triples}

    def test_fixed_seed_reproduces_the_update(self):
        split = make_split(n_items=10)
        items = substream(4, "items").normal(size=(10, 3))
        privacy = PrivacyConfig(mask_ratio=0.3, pseudo_items_p=2)
        results = []
        for _ in range(2):
            state = ClientState(0, np.array([0.5, 0.1, -0.4]))
            cfg = make_cfg(split, items, privacy=privacy, n_layers=2, batch_size=3)
            results.append(client_update(state, items, cfg, substream(8, "c", 2, 0)))
        a, b = results
        assert set(a.item_grads) == set(b.item_grads)
        for key in a.item_grads:
            np.testing.assert_array_equal(a.item_grads[key], b.item_grads[key])
        assert a.data_count == b.data_count

    @pytest.mark.parametrize("n_layers", [0, 1, 3])
    def test_matches_direct_gradients_on_the_local_subgraph(self, n_layers):
        split = make_split(n_items=9)
        items = substream(2, "items").normal(size=(9, 4))
        user_vec = np.array([0.2, -0.1, 0.4, 0.05])
        state = ClientState(0, user_vec.copy())
        cfg = make_cfg(split, items, n_layers=n_layers, gamma=0.02, batch_size=5)
        update = client_update(state, items, cfg, substream(6, "c", 1, 0))

        replay = substream(6, "c", 1, 0)
        cg = build_client_graph(split, 0, cfg.privacy, replay)
        triples = sample_bpr_triples(cg, 5, replay)
        full_op = PropagationOperator(
            1, 9, tuple((0, i) for i in sorted(cg.true_items)), n_layers
        )
        raw = EmbeddingTable(user_vec[None, :], items)
        local = [t._replace(user=0) for t in triples]
        oracle = bpr_gradients(full_op, raw, local, 0.02)
        assert set(update.item_grads) == set(oracle.item_grads)
        for key in update.item_grads:
            np.testing.assert_allclose(
                update.item_grads[key], oracle.item_grads[key], atol=1e-12
            )


class TestPersonalize:
    def test_pure_local_weights(self, rng):
        local = rng.normal(size=(4, 2))
        cluster = rng.normal(size=(4, 2))
        global_ = rng.normal(size=(4, 2))
        w = PersonalizationWeights(1.0, 0.0, 0.0)
        model = personalize(local, cluster, global_, w, np.ones(2))
        np.testing.assert_array_equal(model.item_rows, local)

    def test_identical_models_mix_to_themselves(self, rng):
        rows = rng.normal(size=(3, 2))
        w = PersonalizationWeights(1 / 3, 1 / 3, 1 / 3)
        model = personalize(rows, rows.copy(), rows.copy(), w, np.zeros(2))
        np.testing.assert_allclose(model.item_rows, rows, atol=1e-15)

    def test_scalar_example(self):
        w = PersonalizationWeights(1 / 3, 1 / 3, 1 / 3)
        model = personalize(
            np.full((1, 1), 2.0),
            np.full((1, 1), 4.0),
            np.full((1, 1), 6.0),
            w,
            np.zeros(1),
        )
        assert model.item_rows[0, 0] == pytest.approx(4.0, abs=1e-12)

    def test_global_only_is_bit_exact(self, rng):
        local = rng.normal(size=(5, 3))
        cluster = rng.normal(size=(5, 3))
        global_ = rng.normal(size=(5, 3))
        w = PersonalizationWeights(0.0, 0.0, 1.0)
        model = personalize(local, cluster, global_, w, np.zeros(3))
        assert np.array_equal(model.item_rows, global_)

    def test_linearity_in_each_argument(self, rng):
        tables = [rng.normal(size=(3, 2)) for _ in range(3)]
        w = PersonalizationWeights(0.5, 0.25, 2.0)
        doubled = personalize(2 * tables[0], tables[1], tables[2], w, np.zeros(2))
        base = personalize(*tables, w, np.zeros(2))
        np.testing.assert_allclose(
            doubled.item_rows - base.item_rows, 0.5 * tables[0], atol=1e-12
        )

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError, match="shape"):
            personalize(
                rng.normal(size=(2, 2)),
                rng.normal(size=(3, 2)),
                rng.normal(size=(2, 2)),
                PersonalizationWeights(1, 1, 1),
                np.zeros(2),
            )

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            PersonalizationWeights(-0.1, 0.5, 0.5)


class TestLocalState:
    def test_init_states_copy_user_rows(self, rng):
        table = EmbeddingTable(rng.normal(size=(3, 2)), rng.normal(size=(4, 2)))
        states = init_client_states(table)
        states[0].user_vec[0] = 99.0
        assert table.users[0, 0] != 99.0

    def test_local_item_table_applies_the_overlay(self, rng):
        base = rng.normal(size=(4, 2))
        state = ClientState(0, np.zeros(2), local_rows={2: np.array([5.0, 5.0])})
        rows = local_item_table(state, base)
        np.testing.assert_array_equal(rows[2], [5.0, 5.0])
        np.testing.assert_array_equal(rows[0], base[0])

    def test_infer_user_embedding_zero_layers_is_the_raw_row(self, rng):
        row = rng.normal(size=3)
        out = infer_user_embedding(row, rng.normal(size=(5, 3)), [0, 2], 0)
        np.testing.assert_array_equal(out, row)

    def test_infer_user_embedding_single_item_one_layer(self):
        row = np.array([1.0, 0.0])
        items = np.array([[0.0, 2.0], [9.0, 9.0]])
        out = infer_user_embedding(row, items, [0], 1)
        np.testing.assert_allclose(out, [0.5, 1.0])
