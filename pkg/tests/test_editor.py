import numpy as np
import pytest

from glame_lab import autodiff as ad
from glame_lab import editor as E
from glame_lab import experiments as X
from glame_lab import lm
from glame_lab.world import EditRequest

from conftest import to_float64


def random_instance(rng, d_out, d_in):
    w = rng.normal(size=(d_out, d_in))
    a = rng.normal(size=(d_in, d_in + 3))
    c = a @ a.T + 1e-3 * np.eye(d_in)
    return w, c, rng.normal(size=d_in), rng.normal(size=d_out)


def kkt_update(w, c, k, m):
    """Row-wise minimum of d C d^T subject to d . k = r, via the KKT system."""
    n = len(k)
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = 2 * c
    kkt[:n, n] = k
    kkt[n, :n] = k
    out = np.array(w, dtype=np.float64)
    for i, r in enumerate(m - w @ k):
        rhs = np.zeros(n + 1)
        rhs[n] = r
        out[i] += np.linalg.solve(kkt, rhs)[:n]
    return out


def test_rank_one_contract_1000_instances():
    rng = np.random.default_rng(0)
    worst_constraint = worst_rank = 0.0
    for _ in range(1000):
        d_out, d_in = (int(x) for x in rng.integers(3, 20, size=2))
        w, c, k, m = random_instance(rng, d_out, d_in)
        w_hat = E.rank_one_update(w, c, k, m)
        worst_constraint = max(worst_constraint, np.linalg.norm(w_hat @ k - m) / np.linalg.norm(m))
        sv = np.linalg.svd(w_hat - w, compute_uv=False)
        if len(sv) > 1:
            worst_rank = max(worst_rank, sv[1] / sv[0])
    assert worst_constraint <= 1e-4
    assert worst_rank <= 1e-5


def test_rank_one_matches_kkt_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        d = int(rng.integers(4, 17))
        d_out = int(rng.integers(4, 17))
        w, c, k, m = random_instance(rng, d_out, d)
        got, want = E.rank_one_update(w, c, k, m), kkt_update(w, c, k, m)
        assert np.linalg.norm(got - want) / np.linalg.norm(want) <= 1e-4


def test_rank_one_invariant_to_covariance_scale():
    rng = np.random.default_rng(2)
    for _ in range(50):
        w, c, k, m = random_instance(rng, 6, 8)
        base = E.rank_one_update(w, c, k, m)
        for s in (1e-3, 0.5, 7.0, 1e4):
            scaled = E.rank_one_update(w, s * c, k, m)
            assert np.linalg.norm(scaled - base) / np.linalg.norm(base) <= 1e-5


def test_rank_one_identity_when_constraint_already_holds():
    rng = np.random.default_rng(3)
    w, c, k, _ = random_instance(rng, 5, 7)
    assert np.allclose(E.rank_one_update(w, c, k, w @ k), w, atol=1e-12)


def test_rank_one_keeps_dtype_and_checks_shapes():
    rng = np.random.default_rng(4)
    w, c, k, m = random_instance(rng, 4, 6)
    assert E.rank_one_update(w.astype(np.float32), c, k, m).dtype == np.float32
    with pytest.raises(ad.DimensionError):
        E.rank_one_update(w, c, k[:-1], m)
    with pytest.raises(ad.DimensionError):
        E.rank_one_update(w, c[:-1, :-1], k, m)
    with pytest.raises(ad.ContractError):
        E.rank_one_update(w, c, np.zeros(6), m)


def test_key_drift():
    w = np.eye(3)
    keys = np.eye(3)
    assert E.key_drift(w, w, keys) == 0.0
    assert E.key_drift(w, 1.1 * w, keys) == pytest.approx(0.1)


def test_subject_position_uses_last_occurrence():
    assert E.subject_position([1, 5, 6, 9, 5, 6, 2], [5, 6]) == 5
    with pytest.raises(ValueError):
        E.subject_position([1, 2, 3], [4])
    with pytest.raises(ValueError):
        E.subject_position([1, 2], [])


def test_covariance_is_sum_of_outer_products(tiny_model, tiny_world):
    seqs = X.corpus_sequences(tiny_model, tiny_world)[:10]
    cache = E.estimate_covariance(tiny_model, seqs, 1, ridge=1e-6)
    keys = E.collect_keys(tiny_model, seqs, 1).astype(np.float64)
    raw = keys.T @ keys
    eye = cache.ridge * np.mean(np.diag(raw)) * np.eye(len(raw))
    assert np.allclose(cache.c, raw + eye)
    assert cache.samples == sum(len(s) for s in seqs)
    np.linalg.cholesky(cache.c)


def test_covariance_ridge_escalates_for_rank_deficient_samples(tiny_model, tiny_world):
    seqs = X.corpus_sequences(tiny_model, tiny_world)[:1]
    cache = E.estimate_covariance(tiny_model, seqs, 0, ridge=1e-12)
    assert cache.ridge >= 1e-12
    np.linalg.cholesky(cache.c)
    with pytest.raises(E.DegenerateSample):
        E.collect_keys(tiny_model, [], 0)


def test_covariance_roundtrip(tmp_path, tiny_model, tiny_world):
    cache = E.estimate_covariance(tiny_model, X.corpus_sequences(tiny_model, tiny_world)[:5], 0)
    cache.save(tmp_path / "c.npz")
    back = E.CovarianceCache.load(tmp_path / "c.npz")
    assert back.digest() == cache.digest() and back.layer == 0


def a_request(g, template=0):
    t = g.triples[0]
    o_new = next(o for o in range(len(g.entities)) if o not in (t.o, t.s))
    return EditRequest.create(g, t.s, t.r, o_new, template)


def test_prefixes_shape_and_determinism(tiny_model):
    a = E.sample_prefixes(tiny_model, 5, 0)
    assert a == E.sample_prefixes(tiny_model, 5, 0)
    assert a[0] == [] and len(a) == 5
    eos = tiny_model.tokenizer.eos
    assert all(p[-1] == eos and 2 <= len(p) <= 11 for p in a[1:])
    with pytest.raises(ValueError):
        E.sample_prefixes(tiny_model, 0, 0)


def test_kstar_empty_prefix_is_plain_key(tiny_model, tiny_world):
    req = a_request(tiny_world)
    tok = tiny_model.tokenizer
    ids = tok.encode(req.prompt, bos=True)
    pos = E.subject_position(ids, tok.encode(tiny_world.entities[req.s]))
    _, trace = lm.forward_with_trace(tiny_model, ids)
    k = E.compute_kstar(tiny_model, req, tiny_world.entities[req.s], [[]], 1)
    assert np.allclose(k, trace.keys[1][pos], atol=1e-6)


def test_kstar_is_mean_over_contexts(tiny_model, tiny_world):
    req = a_request(tiny_world)
    subject = tiny_world.entities[req.s]
    prefixes = E.sample_prefixes(tiny_model, 4, 1)
    each = [E.compute_kstar(tiny_model, req, subject, [p], 1) for p in prefixes]
    assert np.allclose(E.compute_kstar(tiny_model, req, subject, prefixes, 1), np.mean(each, axis=0), atol=1e-6)


def float64_model(model):
    return lm.Checkpoint(model.config, to_float64(model), model.vocab)


@pytest.mark.parametrize("lam", [0.0, 0.0625])
def test_substituted_loss_gradient(tiny_model, tiny_world, lam):
    model = float64_model(tiny_model)
    req = a_request(tiny_world)
    obj = E._Objective(model, tiny_world, req, E.sample_prefixes(tiny_model, 3, 0), 1)
    rng = np.random.default_rng(0)
    d = model.config.d_model
    for _ in range(20):
        z0 = rng.normal(size=d)
        with ad.GradTape() as tape:
            z = tape.watch(ad.Tensor(z0))
            loss, _, _ = obj.loss(z, lam)
        got = ad.backward(tape, loss)[z]
        num = ad.numerical_gradient(lambda v: obj.loss(ad.Tensor(v), lam)[0].item(), z0, 1e-6)
        assert ad.relative_error(got, num) <= 1e-3


def test_loss_at_zero_is_target_nll(tiny_model, tiny_world):
    req = a_request(tiny_world)
    tok = tiny_model.tokenizer
    obj = E._Objective(tiny_model, tiny_world, req, [[]], 1)
    _, nll, kl = obj.loss(ad.Tensor(np.zeros(tiny_model.config.d_model, np.float32)), 0.0)
    target = tok.encode(tiny_world.entities[req.o_new])
    want = -lm.sequence_logprob(tiny_model, [tok.encode(req.prompt, bos=True)], [target])[0]
    assert nll == pytest.approx(want, abs=1e-4)
    assert kl == pytest.approx(0.0, abs=1e-6)


def small_config(method, **kw):
    base = dict(method=method, layer=1, init_layer=0, n=1, m=3, prefixes=3, max_steps=4)
    base.update(kw)
    return E.EditConfig(**base)


@pytest.mark.parametrize("method", E.METHODS)
def test_edit_touches_only_one_matrix(tiny_model, tiny_world, method):
    cache = X.covariance_for(tiny_model, tiny_world, 1, samples=30)
    req = a_request(tiny_world)
    new, sol = E.edit(tiny_model, tiny_world, req, cache, small_config(method))
    assert X.frozen_except(tiny_model, new, lm.ffn_weight_name(1))
    assert not np.array_equal(new.weights[lm.ffn_weight_name(1)], tiny_model.weights[lm.ffn_weight_name(1)])
    assert sol.constraint_residual <= 1e-4
    sv = sol.update_singular_values()
    assert sv[1] / sv[0] <= 1e-5
    assert len(sol.trace) == 5 and sol.stop_reason == "max_steps"
    assert (sol.params is None) == (method == "rome")


def test_edit_is_deterministic(tiny_model, tiny_world):
    cache = X.covariance_for(tiny_model, tiny_world, 1, samples=30)
    req = a_request(tiny_world)
    a = E.edit(tiny_model, tiny_world, req, cache, small_config("glame"))[1]
    b = E.edit(tiny_model, tiny_world, req, cache, small_config("glame"))[1]
    assert a.to_json() == b.to_json()


def test_early_stop_on_easy_target(tiny_model, tiny_world):
    cfg = small_config("rome", stop_loss=1e3)
    obj_req = a_request(tiny_world)
    cache = X.covariance_for(tiny_model, tiny_world, 1, samples=30)
    _, sol = E.edit(tiny_model, tiny_world, obj_req, cache, cfg)
    assert sol.stop_reason == "early_stop" and len(sol.trace) == 1


def test_edit_errors_name_the_stage(tiny_model, tiny_world):
    cache = X.covariance_for(tiny_model, tiny_world, 1, samples=30)
    req = a_request(tiny_world)
    with pytest.raises(E.EditError) as info:
        E.edit(tiny_model, tiny_world, req, cache, small_config("glame"), leak_filter=[req.o_new])
    assert info.value.stage == "build_subgraph"
    with pytest.raises(E.EditError) as info:
        E.edit(tiny_model, tiny_world, req, cache, small_config("rome", layer=0))
    assert info.value.stage == "setup"


def test_edit_config_validation_and_roundtrip():
    cfg = E.EditConfig()
    assert E.EditConfig.from_dict(cfg.to_dict()) == cfg
    assert E.EditConfig(n=0).gnn_layers == 1
    for bad in (dict(method="x"), dict(lam=-1), dict(m=0), dict(prefixes=0), dict(lr=0)):
        with pytest.raises(ValueError):
            E.EditConfig(**bad)


def test_report_contents(tiny_model, tiny_world):
    cache = X.covariance_for(tiny_model, tiny_world, 1, samples=30)
    _, sol = E.edit(tiny_model, tiny_world, a_request(tiny_world), cache, small_config("glame"))
    rep = sol.report()
    assert rep["model_digest"] == tiny_model.digest()
    assert rep["covariance_digest"] == cache.digest()
    assert rep["steps"] == 4 and rep["subgraph"]["root"] == sol.edit.s
    assert set(rep["digests"]) == {"k_star", "m_star", "w_hat", "rgnn"}


def test_edit_sequence_rejects_duplicate_slots(tiny_model, tiny_world):
    cache = X.covariance_for(tiny_model, tiny_world, 1, samples=30)
    req = a_request(tiny_world)
    with pytest.raises(ValueError):
        E.edit_sequence(tiny_model, tiny_world, [req, req], cache, small_config("rome"))
