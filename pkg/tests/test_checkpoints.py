import numpy as np
import pytest

from xdr.adversary import TDAR, DomainData
from xdr.cf_models import ItemPop, MatrixFactorization, TextCF
from xdr.checkpoints import load_model, save_model
from xdr.experiments import fit_features
from xdr.serialization import FormatError, load_checkpoint, save_checkpoint

USERS = np.arange(10)


@pytest.fixture(scope="module")
def fitted(small_domains):
    source, target, _ = small_domains
    R = source.matrix("train")
    tmn, fs = fit_features(source, 0, n_keys=4, max_iter=2)
    _, ft = fit_features(target, 0, n_keys=4, max_iter=2)
    tcf = TextCF(n_factors=4, max_iter=2).fit(R, source.validation, fs.E, fs.F)
    models = {
        "itempop": ItemPop().fit(R),
        "mf": MatrixFactorization(n_factors=4, max_iter=2).fit(R, source.validation),
        "tcf": tcf,
        "wtcf": TextCF(n_factors=4, max_iter=2, weighting="wtcf").fit(R, source.validation, fs.E, fs.F),
        "tmn": tmn,
        "tdar": TDAR(n_factors=4, hidden=(8, 8, 8), max_iter=2, batch_size=64, adv_batch_size=16).fit(
            DomainData.from_bundle(source, fs), DomainData.from_bundle(target, ft), tcf.bank_),
    }
    return source, target, fs, ft, models


@pytest.mark.parametrize("kind", ["itempop", "mf", "tcf", "wtcf", "tmn", "tdar"])
def test_round_trip_predictions(fitted, tmp_path, kind):
    source, *_, models = fitted
    model = models[kind]
    save_model(tmp_path / "m.ckpt", kind, model, {"lr": 0.01}, seed=3)
    back, header = load_model(tmp_path / "m.ckpt", bundle=source)
    assert header["kind"] == kind and header["seed"] == 3 and header["config"] == {"lr": 0.01}
    np.testing.assert_array_equal(back.score_matrix(USERS), model.score_matrix(USERS))
    if kind != "itempop":
        assert back.history_ == model.history_


def test_tdar_resumes_identically(fitted, tmp_path):
    source, target, fs, ft, models = fitted
    S, T = DomainData.from_bundle(source, fs), DomainData.from_bundle(target, ft)
    model = models["tdar"]
    save_model(tmp_path / "t.ckpt", "tdar", model, {}, seed=0)
    back, _ = load_model(tmp_path / "t.ckpt")
    for k, v in model.state_.adam.items():
        assert back.state_.adam[k].t == v.t
        np.testing.assert_array_equal(back.state_.adam[k].m, v.m)
    kw = dict(n_factors=4, hidden=(8, 8, 8), max_iter=1, batch_size=64, adv_batch_size=16, random_state=7)
    a = TDAR(**kw).fit(S, T, init_state=_copy_state(model, tmp_path))
    b = TDAR(**kw).fit(S, T, init_state=back.state_)
    for k, v in a.state_.groups().items():
        assert v.tobytes() == b.state_.groups()[k].tobytes()


def _copy_state(model, tmp_path):
    # a second independent copy, so the in-memory fitted model stays untouched
    save_model(tmp_path / "c.ckpt", "tdar", model, {}, seed=0)
    return load_model(tmp_path / "c.ckpt")[0].state_


def test_tmn_needs_bundle(fitted, tmp_path):
    *_, models = fitted
    save_model(tmp_path / "m.ckpt", "tmn", models["tmn"], {}, seed=0)
    with pytest.raises(ValueError, match="bundle"):
        load_model(tmp_path / "m.ckpt")


def test_frozen_features_stored_bitwise(fitted, tmp_path):
    _, _, fs, ft, models = fitted
    save_model(tmp_path / "t.ckpt", "tdar", models["tdar"], {}, seed=0)
    _, arrays = load_checkpoint(tmp_path / "t.ckpt")
    assert arrays["Es"].tobytes() == fs.E.tobytes() and arrays["Ft"].tobytes() == ft.F.tobytes()


def test_unknown_kind(fitted, tmp_path):
    *_, models = fitted
    with pytest.raises(ValueError, match="unknown model kind"):
        save_model(tmp_path / "m.ckpt", "bpr", models["mf"], {}, seed=0)
    save_checkpoint(tmp_path / "x.ckpt", "bpr", {"a": np.zeros(2)}, {}, 0)
    with pytest.raises(FormatError):
        load_model(tmp_path / "x.ckpt")


def test_corrupt_file(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 20)
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad.ckpt")


def test_truncated_file(fitted, tmp_path):
    *_, models = fitted
    save_model(tmp_path / "m.ckpt", "mf", models["mf"], {}, seed=0)
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(raw[:-7])
    with pytest.raises(FormatError):
        load_model(tmp_path / "m.ckpt")


def test_identical_bytes_on_resave(fitted, tmp_path):
    *_, models = fitted
    for name in ("a", "b"):
        save_model(tmp_path / f"{name}.ckpt", "tcf", models["tcf"], {"x": 1}, seed=0)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
