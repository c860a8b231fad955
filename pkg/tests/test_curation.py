import json
import sys
import textwrap

import numpy as np
import pytest

from styleflow import curation, imaging, synthetic
from styleflow.curation import CurationRecord, ScorerBinding, run_pipeline


def fixed(stage, score, threshold=None):
    return ScorerBinding(stage, "callable", threshold, func=lambda rec: score)


def all_pass(**overrides):
    scores = {"consistency": 50.0, "aesthetic": 8.0, "canny": 0.9}
    scores.update(overrides)
    return [fixed(s, v) for s, v in scores.items()]


def record(i=0, path="x.png", prompt="p"):
    return CurationRecord(str(i), path, prompt)


@pytest.fixture
def echo_script(tmp_path):
    """External scorer: echoes the score given on its command line for every record."""
    script = tmp_path / "echo_scorer.py"
    script.write_text(textwrap.dedent("""
        import json, sys
        score = float(sys.argv[1])
        for line in sys.stdin:
            if line.strip():
                rec = json.loads(line)
                print(json.dumps({"id": rec["id"], "score": score}))
    """))
    return script


# ---------------------------------------------------------------- thresholds

@pytest.mark.parametrize("stage,below,at", [
    ("consistency", 29.9, 30.0),
    ("aesthetic", 6.99, 7.0),
    ("canny", 0.66, 0.67),
])
def test_threshold_boundaries(stage, below, at):
    b = ScorerBinding(stage)
    assert not b.passes(below) and b.passes(at)
    for score, expected in ((below, "fail"), (at, "pass")):
        bindings = [fixed(s, score) if s == stage else fixed(s, 1e9) for s in curation.STAGES]
        (rec,), _ = run_pipeline([record()], bindings)
        assert rec.decisions[stage] == expected


def test_default_thresholds():
    assert curation.DEFAULT_THRESHOLDS == {"consistency": 30.0, "aesthetic": 7.0, "canny": 0.67}


# ---------------------------------------------------------------- external scorers

def test_echo_scorer_roundtrip(echo_script):
    cmd = [sys.executable, str(echo_script), "31.25"]
    binding = ScorerBinding("consistency", "command", command=cmd)
    assert curation.score_consistency(record(), binding) == 31.25


def test_echo_scorer_canny_one_passes(echo_script):
    bindings = all_pass()
    bindings[2] = ScorerBinding("canny", "command", command=[sys.executable, str(echo_script), "1.0"])
    (rec,), summary = run_pipeline([record()], bindings)
    assert rec.scores["canny"] == 1.0 and rec.final == "kept" and summary["kept"] == 1


def test_failing_scorer_marks_errored(tmp_path):
    bad = tmp_path / "bad.py"
    bad.write_text("import sys; sys.exit(4)\n")
    bindings = all_pass()
    bindings[0] = ScorerBinding("consistency", "command", command=[sys.executable, str(bad)])
    recs, summary = run_pipeline([record(0), record(1)], bindings)
    assert all(r.final == "errored" and "status 4" in r.error for r in recs)
    assert summary["errored"] == 2


# ---------------------------------------------------------------- builtin stubs

def test_stub_deterministic(tmp_path):
    img = synthetic.style_image(2, size=32)
    imaging.write_png(img, tmp_path / "s.png")
    rec = record(path=str(tmp_path / "s.png"), prompt="orange ring")
    a = [curation.score_aesthetic(rec), curation.score_consistency(rec), curation.score_canny_similarity(rec)]
    b = [curation.score_aesthetic(rec), curation.score_consistency(rec), curation.score_canny_similarity(rec)]
    assert a == b
    assert 0 <= a[0] <= 10 and 0 <= a[1] <= 100 and 0 <= a[2] <= 1


def test_canny_proxy_constant_image_is_zero(tmp_path):
    imaging.write_png(np.full((16, 16, 3), 0.5), tmp_path / "c.png")
    rec = record(path=str(tmp_path / "c.png"))
    assert curation.score_canny_similarity(rec) == 0.0
    assert not ScorerBinding("canny").passes(0.0)


def test_canny_proxy_formula():
    img = synthetic.content_image(16, 0)
    edges = imaging.canny(img)
    # Direct evaluation: cosine of the two 64-bin histograms of nonzero magnitudes.
    def hist(plane):
        mag, _ = imaging.canny_gradients(plane)
        h = np.zeros(64)
        for v in mag[mag > 0]:
            h[min(int(v // 4), 63)] += 1
        return h

    dil = np.zeros_like(edges)
    for y, x in zip(*np.nonzero(edges)):
        dil[max(0, y - 1):y + 2, max(0, x - 1):x + 2] = 1
    a, b = hist(imaging.to_luma(img)), hist(dil.astype(float))
    expected = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    assert curation.canny_similarity_stub(img) == pytest.approx(expected, abs=1e-12)


def test_consistency_empty_prompt_scores_zero():
    assert curation.consistency_stub(np.full((8, 8, 3), 0.5), "") == 0.0


# ---------------------------------------------------------------- pipeline

def test_empty_input():
    recs, summary = run_pipeline([], all_pass())
    assert recs == [] and summary == {
        "input_count": 0, "kept": 0, "errored": 0,
        "rejected_by_stage": {"consistency": 0, "aesthetic": 0, "canny": 0},
    }


def test_short_circuit():
    (rec,), summary = run_pipeline([record()], all_pass(consistency=10.0))
    assert rec.final == "rejected" and rec.rejected_stage == "consistency"
    assert set(rec.scores) == {"consistency"}
    assert summary["rejected_by_stage"]["consistency"] == 1


def synthetic_records(count=100, seed=0):
    rng = np.random.default_rng(seed)
    table = {}
    for i in range(count):
        table[str(i)] = {
            "consistency": float(np.round(rng.uniform(20, 40), 1)),
            "aesthetic": float(np.round(rng.uniform(6, 8), 2)),
            "canny": float(np.round(rng.uniform(0.5, 0.8), 2)),
        }
    bindings = [ScorerBinding(s, "callable", func=lambda r, s=s: table[r.id][s]) for s in curation.STAGES]
    return table, bindings


def test_kept_set_matches_brute_force():
    table, bindings = synthetic_records()
    recs, summary = run_pipeline([record(i) for i in range(100)], bindings)
    brute = {i for i, s in table.items()
             if s["consistency"] >= 30 and s["aesthetic"] >= 7 and s["canny"] >= 0.67}
    assert {r.id for r in recs if r.final == "kept"} == brute
    assert summary["kept"] == len(brute) and 0 < len(brute) < 100
    assert sum(summary["rejected_by_stage"].values()) + summary["kept"] == 100


def test_raising_threshold_never_grows_kept_set():
    table, bindings = synthetic_records(seed=1)
    kept = lambda bs: {r.id for r in run_pipeline([record(i) for i in range(100)], bs)[0] if r.final == "kept"}
    base = kept(bindings)
    for k in range(3):
        raised = [ScorerBinding(b.stage, "callable", b.threshold * (1.05 if i == k else 1), func=b.func)
                  for i, b in enumerate(bindings)]
        assert kept(raised) <= base


@pytest.mark.parametrize("parallelism", [1, 4, 16])
def test_output_invariant_under_parallelism(parallelism):
    table, bindings = synthetic_records(seed=2)
    serial = [r.to_json() for r in run_pipeline([record(i) for i in range(100)], bindings, 1)[0]]
    out = [r.to_json() for r in run_pipeline([record(i) for i in range(100)], bindings, parallelism)[0]]
    assert out == serial


def test_curate_files_audit(tmp_path):
    for i, kind in enumerate((0, 1, 2)):
        imaging.write_png(synthetic.style_image(kind, 32), tmp_path / f"{i}.png")
    lines = [json.dumps({"id": f"r{i}", "image_path": f"{i}.png", "prompt": synthetic.PROMPTS[i]}) for i in range(3)]
    lines += ["not json", json.dumps({"id": "missing", "image_path": "nope.png", "prompt": "x"})]
    (tmp_path / "in.jsonl").write_text("\n".join(lines) + "\n")
    summary = curation.curate_files(tmp_path / "in.jsonl", tmp_path / "out.jsonl", tmp_path / "sum.json")
    out = [json.loads(l) for l in (tmp_path / "out.jsonl").read_text().splitlines()]
    assert [o["id"] for o in out] == ["r0", "r1", "r2", "line-4", "missing"]
    assert all(o["final"] in ("kept", "rejected", "errored") for o in out)
    assert all("rejected_stage" in o for o in out if o["final"] == "rejected")
    assert out[3]["final"] == "errored" and out[4]["final"] == "errored"
    assert summary["input_count"] == 5 and summary["errored"] == 2
    assert json.loads((tmp_path / "sum.json").read_text()) == summary
    again = tmp_path / "out2.jsonl"
    curation.curate_files(tmp_path / "in.jsonl", again, None, None, parallelism=4)
    assert again.read_bytes() == (tmp_path / "out.jsonl").read_bytes()


def test_binding_validation():
    with pytest.raises(ValueError):
        ScorerBinding("bogus")
    with pytest.raises(ValueError):
        ScorerBinding("canny", "command")
    with pytest.raises(ValueError):
        ScorerBinding("canny", threshold=float("nan"))
