import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pseudomos.audio_io import Waveform, write_wav
from pseudomos.dataeval.build import VAL_FRACTION, DatasetError, build_dataset, split_sizes
from pseudomos.dataeval.evaluate import (
    AggregationError, DatasetResult, EvalReport, EvaluationError, aggregate_runs, evaluate, format_cell,
    render_table,
)
from pseudomos.dataeval.manifest import (
    Manifest, ManifestError, ManifestRecord, import_manifest, read_manifest, write_manifest,
)
from pseudomos.dataeval.metrics import UndefinedCorrelationError, pcc, srcc
from pseudomos.degrade import CONDITIONS, DegradationSpec
from pseudomos.models import DNSMOS_PRO, ModelConfig, build_model
from pseudomos.synth import write_clean_corpus

from oracles import brute_pcc, brute_srcc

# ---------------------------------------------------------------- metrics


def test_pcc_examples():
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert pcc(x, x) == 1.0
    assert pcc([1, 2, 3], [3, 2, 1]) == -1.0
    # by hand: sxy = 4.7, sxx = 5, syy = 4.5
    got = pcc([1, 2, 3, 4], [1.1, 1.9, 3.2, 3.8])
    assert abs(got - 4.7 / math.sqrt(22.5)) <= 1e-12
    assert abs(got - 0.99085) <= 0.00001
    assert abs(got - brute_pcc([1, 2, 3, 4], [1.1, 1.9, 3.2, 3.8])) <= 1e-12


def test_undefined_correlation():
    with pytest.raises(UndefinedCorrelationError):
        pcc([1, 2, 3], [2, 2, 2])
    with pytest.raises(UndefinedCorrelationError):
        pcc([1.0], [2.0])
    with pytest.raises(UndefinedCorrelationError):
        srcc([3, 3, 3], [1, 2, 3])
    with pytest.raises(ValueError):
        pcc([1, 2], [1, 2, 3])


def test_srcc_examples():
    x = np.array([0.3, 1.2, 2.0, 5.5])
    assert srcc(x, np.exp(x)) == 1.0
    assert srcc([1.1, 2.5, 2.6], [10, 20, 30]) == 1.0
    assert srcc([1, 1, 2], [3, 3, 4]) == 1.0


# rounded so subnormal spreads cannot underflow the sums of squares
finite = st.floats(-1e3, 1e3, allow_nan=False).map(lambda v: round(v, 6))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 200).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite),
                                                       arrays(np.float64, n, elements=finite))))
def test_against_brute_force(pair):
    x, y = pair
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return
    assert abs(pcc(x, y) - brute_pcc(x, y)) <= 1e-10
    assert abs(srcc(x, y) - brute_srcc(x, y)) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(3, 50), elements=st.floats(-100, 100)),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_affine_invariance(x, a, b):
    if np.ptp(x) < 1e-3:
        return
    y = x ** 3 + np.arange(len(x))
    assert abs(pcc(a * x + b, y) - pcc(x, y)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, st.integers(3, 50), elements=st.integers(-1000, 1000)))
def test_anti_correlation_exact(x):
    if np.ptp(x) == 0:
        return
    x = x.astype(np.float64)
    assert pcc(x, -x) == -1.0
    assert pcc(x, -x + 7.0) == -1.0
    assert pcc(3.0 * x + 2.0, x) == 1.0


# ---------------------------------------------------------------- manifests

def test_manifest_round_trip(tmp_path):
    recs = [ManifestRecord("a.wav", 3.2, "human", "test", None, "corpus", 1.5),
            ManifestRecord("b.wav", None, "none", "train", DegradationSpec("Noise+Room", {"snr_db": 1.0, "rt60_s": 1.0}).to_dict(),
                           "libriaugmented", 2.0)]
    write_manifest(Manifest(recs), tmp_path / "m.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert set(rows[0]) == {"clip_path", "label", "rater", "split", "condition", "source_dataset",
                            "duration_s", "rater_detail"}
    back = read_manifest(tmp_path / "m.jsonl")
    assert back.records == recs
    assert back.base_dir == str(tmp_path)


def test_manifest_invariants():
    with pytest.raises(ManifestError):
        ManifestRecord("a.wav", 3.0, "none")
    with pytest.raises(ManifestError):
        ManifestRecord("a.wav", split="dev")
    with pytest.raises(ManifestError):
        Manifest([ManifestRecord("a.wav"), ManifestRecord("a.wav")])
    with pytest.raises(ManifestError):
        ManifestRecord.from_dict({"clip_path": "a.wav", "mos": 3})


def test_import_jsonl(tmp_path):
    path = tmp_path / "ext.jsonl"
    path.write_text(json.dumps({"clip_path": "a.wav", "label": 3.2, "duration_s": 4.0}) + "\n")
    m = import_manifest(path, "jsonl", {"source_dataset": "NISQA_TEST_FOR"})
    r = m.records[0]
    assert (r.clip_path, r.label, r.rater, r.source_dataset) == ("a.wav", 3.2, "human", "NISQA_TEST_FOR")


def test_import_csv_mosmap(tmp_path):
    path = tmp_path / "ext.csv"
    path.write_text("file,mos,other\nx/a.wav,2.5,q\nx/b.wav,4.0,r\n")
    m = import_manifest(path, "csv_mosmap", {"path_column": "file", "mos_column": "mos",
                                             "source_dataset": "set", "split": "val"})
    assert [r.label for r in m] == [2.5, 4.0]
    assert all(r.split == "val" and r.rater == "human" for r in m)
    with pytest.raises(ManifestError):
        import_manifest(path, "csv_mosmap", {"path_column": "file"})


def test_import_rejects_out_of_scale(tmp_path):
    path = tmp_path / "ext.jsonl"
    good = [{"clip_path": f"{i}.wav", "label": 3.0} for i in range(199)]
    path.write_text("".join(json.dumps(r) + "\n" for r in good + [{"clip_path": "bad.wav", "label": 7}]))
    m = import_manifest(path)
    assert len(m) == 199 and "bad.wav" not in [r.clip_path for r in m]
    path.write_text("".join(json.dumps(r) + "\n" for r in good[:50] + [{"clip_path": "bad.wav", "label": 7}]))
    with pytest.raises(ManifestError):
        import_manifest(path)


# ---------------------------------------------------------------- builder

@pytest.fixture(scope="module")
def clean_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("clean")
    write_clean_corpus(d, 4, duration_s=0.5, seed=1)
    return d


def test_split_sizes():
    assert split_sizes(1000) == (989, 11)
    assert abs(VAL_FRACTION - 0.01116) < 1e-5
    assert split_sizes(101129) == (100000, 1129)


def test_build_dataset_outputs(clean_dir, tmp_path):
    train, val = build_dataset(clean_dir, tmp_path / "out", 30, val_fraction=0.2, seed=5)
    assert len(train) == 24 and len(val) == 6
    assert (tmp_path / "out/train.jsonl").exists() and (tmp_path / "out/val.jsonl").exists()
    for r in list(train) + list(val):
        assert r.label is None and r.rater == "none"
        assert r.condition["condition"] in CONDITIONS
        assert os.path.exists(train.path_of(r))


def test_build_dataset_deterministic(clean_dir, tmp_path):
    build_dataset(clean_dir, tmp_path / "a", 20, seed=3)
    build_dataset(clean_dir, tmp_path / "b", 20, seed=3, workers=4)
    for name in ["train.jsonl", "val.jsonl"] + [f"clips/clip_{i:06d}.wav" for i in range(20)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_build_dataset_skips_unreadable(clean_dir, tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    (src / "broken.wav").write_bytes(b"garbage")
    with pytest.raises(DatasetError):
        build_dataset(src, tmp_path / "o", 3)
    write_wav(Waveform(np.random.default_rng(0).standard_normal(8000) * 0.1, 16000), src / "ok.wav")
    train, val = build_dataset(src, tmp_path / "o", 3)
    assert len(train) + len(val) == 3


# ---------------------------------------------------------------- evaluate / aggregate / report

def labeled_set(tmp_path, n, seed):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        name = f"t{seed}_{i}.wav"
        write_wav(Waveform(rng.standard_normal(4000) * rng.uniform(0.01, 0.5), 16000), tmp_path / name)
        recs.append(ManifestRecord(name, float(rng.uniform(1, 5)), "human", "test"))
    return Manifest(recs, str(tmp_path))


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(DNSMOS_PRO, widths=(4, 4, 4, 4), head_hidden=8, seed=1))


def test_evaluate_report(model, tmp_path):
    tests = {"A": labeled_set(tmp_path, 8, 1), "B": labeled_set(tmp_path, 6, 2)}
    rep = evaluate(model, tests)
    assert list(rep.datasets) == ["A", "B"]
    assert rep.datasets["A"].n_clips == 8
    assert -1 <= rep.datasets["A"].pcc <= 1 and -1 <= rep.datasets["A"].srcc <= 1
    assert evaluate(model, tests).to_dict() == rep.to_dict()


def test_evaluate_single_clip_undefined(model, tmp_path):
    with pytest.raises(UndefinedCorrelationError):
        evaluate(model, {"one": labeled_set(tmp_path, 1, 3)})
    rep = evaluate(model, {"one": labeled_set(tmp_path, 1, 3)}, strict=False)
    assert "UndefinedCorrelationError" in rep.datasets["one"].error


def test_evaluate_unreadable_budget(model, tmp_path):
    m = labeled_set(tmp_path, 10, 4)
    os.remove(m.path_of(m.records[0]))
    with pytest.raises(EvaluationError):
        evaluate(model, {"x": m})
    big = labeled_set(tmp_path, 40, 5)
    os.remove(big.path_of(big.records[0]))
    rep = evaluate(model, {"x": big})
    assert rep.datasets["x"].n_clips == 39 and rep.datasets["x"].n_excluded == 1


def report(pccs: dict, seed=0):
    return EvalReport({k: DatasetResult(v, v, 10) for k, v in pccs.items()}, [seed],
                      runs=[{k: DatasetResult(v, v, 10) for k, v in pccs.items()}])


def test_aggregate_examples():
    agg = aggregate_runs([report({"A": 0.6}), report({"A": 0.7}, 1)])
    assert math.isclose(agg.datasets["A"].pcc, 0.65)
    assert abs(agg.datasets["A"].pcc_std - 0.0707) < 1e-4
    assert format_cell(agg.datasets["A"].pcc, agg.datasets["A"].pcc_std) == "0.65 ± 0.07"
    assert agg.n_runs == 2 and agg.seeds == [0, 1]
    same = aggregate_runs([report({"A": 0.42}, i) for i in range(10)])
    assert same.datasets["A"].pcc_std < 1e-12 and same.n_runs == 10
    assert format_cell(same.datasets["A"].pcc, same.datasets["A"].pcc_std).endswith("± 0.00")
    with pytest.raises(AggregationError):
        aggregate_runs([report({"A": 0.5}), report({"B": 0.5})])


def test_report_round_trip(tmp_path):
    agg = aggregate_runs([report({"A": 0.6, "B": 0.1}), report({"A": 0.7, "B": 0.2}, 1)])
    agg.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json").to_dict() == agg.to_dict()


def test_render_table_layout_and_bold():
    rows = [aggregate_runs([report({"LIVETALK": 0.55, "FOR": 0.76})], strategy="small"),
            aggregate_runs([report({"LIVETALK": 0.63, "FOR": 0.76})], strategy="two-stage")]
    text = render_table(rows)
    lines = text.splitlines()
    assert lines[0].startswith("Training data ↓ / Test data →")
    assert "LIVETALK" in lines[0] and lines[0].index("LIVETALK") < lines[0].index("FOR")
    small = next(line for line in lines if line.startswith("small"))
    two = next(line for line in lines if line.startswith("two-stage"))
    assert "**0.63 ± 0.00**" in two and "**0.55" not in small
    # exact ties are bolded jointly
    assert small.count("**0.76 ± 0.00**") == 1 and two.count("**0.76 ± 0.00**") == 1
