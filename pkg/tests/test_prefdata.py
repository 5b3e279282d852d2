import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stagewise.core import Candidate, PipelineConfig, Problem, StageKind
from stagewise.exceptions import InvalidRatio, ParseError
from stagewise.prefdata import (
    CreditLabel,
    FormulationRollout,
    PairingPolicy,
    PreferenceDataset,
    PreferencePair,
    ProblemRollout,
    audit_pairs,
    build_pairs,
    collect_rollouts,
    credit_formulation,
    credit_solution,
    dataset_stats,
    format_pair_table,
    read_pairs,
    read_rollouts,
    split_dataset,
    write_pairs,
    write_rollouts,
)
from stagewise.verify import SyntheticExecutor, Verdict, VerificationOutcome

F, S = StageKind.FORMULATION, StageKind.SOLUTION
POS, NEG = CreditLabel.POSITIVE, CreditLabel.NEGATIVE


def out(v, cid="c"):
    v = Verdict(v)
    has_gt = v is not Verdict.NO_GROUND_TRUTH
    ans = 1.0 if v in (Verdict.VERIFIED, Verdict.MISMATCH, Verdict.NO_GROUND_TRUTH) else None
    return VerificationOutcome(cid, v, has_gt, ans)


def test_credit_solution_examples():
    assert credit_solution(out("verified")) is POS
    assert credit_solution(out("mismatch")) is NEG
    assert credit_solution(out("not_executed")) is NEG
    assert credit_solution(out("no_ground_truth")) is NEG


def test_credit_formulation_examples():
    assert credit_formulation([out("mismatch"), out("not_executed"), out("verified")]) is POS
    assert credit_formulation([out("mismatch"), out("not_executed")]) is NEG
    assert credit_formulation([]) is NEG


@given(st.lists(st.sampled_from(list(Verdict)), max_size=8))
def test_existential_lift(vs):
    outs = [out(v) for v in vs]
    assert (credit_formulation(outs) is POS) == any(credit_solution(o) is POS for o in outs)


def rollout(pid, form_labels, sol_verdicts=None, run_id="r"):
    """form_labels: list of '+'/'-'; each formulation gets one verified or mismatch solution
    unless explicit per-formulation solution verdict lists are given."""
    forms = []
    for i, lab in enumerate(form_labels):
        f = Candidate(f"{pid}/F{i}", F, f"form {pid} {i}")
        verdicts = sol_verdicts[i] if sol_verdicts else (["verified"] if lab == "+" else ["mismatch"])
        sols = tuple(Candidate(f"{pid}/F{i}/S{j}", S, f"sol {pid} {i} {j}", parent_id=f.id)
                     for j in range(len(verdicts)))
        forms.append(FormulationRollout(f, sols, tuple(out(v, s.id) for v, s in zip(verdicts, sols))))
    return ProblemRollout(Problem(pid, f"statement {pid}", 1.0), tuple(forms), run_id)


def test_formulation_pairs_cross_product():
    ds_f, ds_s = build_pairs([rollout("p", "++-")])
    assert len(ds_f) == 2
    assert {p.rejected for p in ds_f} == {"form p 2"}
    assert all(p.context == "statement p" for p in ds_f)


def test_all_positive_solutions_no_pairs():
    ds_f, ds_s = build_pairs([rollout("p", "+", [["verified"] * 4])])
    assert len(ds_s) == 0 and len(ds_f) == 0


def test_solution_pairs_context_is_formulation():
    ds_f, ds_s = build_pairs([rollout("p", "+", [["verified", "mismatch", "not_executed"]])])
    assert len(ds_s) == 2 and all(p.context == "form p 0" for p in ds_s)
    assert all(p.provenance["context_id"] == "p/F0" for p in ds_s)


def test_empty_formulations_excluded():
    ro = rollout("p", "+-", [["verified"], []])
    ds_f, _ = build_pairs([ro])
    assert len(ds_f) == 0


def test_cap_subsample():
    ro = rollout("p", "+", [["verified"] * 4 + ["mismatch"] * 3])
    full = build_pairs([ro])[1]
    assert len(full) == 12
    a = build_pairs([ro], PairingPolicy(cap_per_context=5, seed=1))[1]
    b = build_pairs([ro], PairingPolicy(cap_per_context=5, seed=1))[1]
    c = build_pairs([ro], PairingPolicy(cap_per_context=5, seed=2))[1]
    assert len(a) == 5 and a == b
    assert {p.provenance["chosen_id"] + p.provenance["rejected_id"] for p in a} <= \
        {p.provenance["chosen_id"] + p.provenance["rejected_id"] for p in full}
    assert len(c) == 5
    assert len(build_pairs([ro], PairingPolicy(cap_per_context=50))[1]) == 12


def test_stats_examples():
    ds_f, _ = build_pairs([rollout("p", "++-")])
    st_ = dataset_stats(ds_f)
    assert (st_.n_contexts, st_.n_pairs, st_.n_positive, st_.n_negative) == (1, 2, 2, 1)
    assert dataset_stats(PreferenceDataset(F)).to_dict() == {"n_contexts": 0, "n_pairs": 0,
                                                             "n_positive": 0, "n_negative": 0}


def test_pair_table_layout():
    ds_f, ds_s = build_pairs([rollout("p", "++-", [["verified", "mismatch"]] * 2 + [["mismatch"]])])
    text = format_pair_table([("Easy (1)", 1, ds_f, ds_s)])
    head = text.splitlines()[0]
    for col in ("Subset", "Sample Size", "# (p, f+, f-)", "# (f, s+, s-)"):
        assert col in head
    assert "Easy (1)" in text


def test_duplicate_pairs_rejected():
    p = PreferencePair(F, "c", "a", "b", {"problem_id": "p", "chosen_id": "x", "rejected_id": "y"})
    with pytest.raises(ValueError):
        PreferenceDataset(F, (p, p))
    with pytest.raises(ValueError):
        PreferencePair(F, "c", "a", "b", {"chosen_id": "x", "rejected_id": "x"})


def _singletons(n):
    return PreferenceDataset(F, tuple(
        PreferencePair(F, f"c{i}", "a", "b", {"problem_id": f"p{i}", "chosen_id": "a", "rejected_id": "b"})
        for i in range(n)))


def test_split_examples():
    ds = _singletons(10)
    tr, ev = split_dataset(ds, 0.1, seed=0)
    assert (len(tr), len(ev)) == (9, 1)
    assert not {p.problem_id for p in tr} & {p.problem_id for p in ev}
    tr0, ev0 = split_dataset(ds, 0.0, seed=0)
    assert len(ev0) == 0 and len(tr0) == 10
    assert split_dataset(ds, 0.1, seed=4) == split_dataset(ds, 0.1, seed=4)
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(InvalidRatio):
            split_dataset(ds, bad, 0)


@pytest.mark.parametrize("n,ratio", [(10, 0.3), (37, 0.1), (100, 0.25), (7, 0.5)])
def test_split_exact_size_on_singletons(n, ratio):
    tr, ev = split_dataset(_singletons(n), ratio, seed=3)
    assert len(ev) == round(ratio * n) and len(tr) + len(ev) == n


def test_grouped_split_no_leakage():
    ros = [rollout(f"p{k}", "+-+-", [["verified", "mismatch"]] * 4) for k in range(12)]
    _, ds_s = build_pairs(ros)
    for seed in range(10):
        tr, ev = split_dataset(ds_s, 0.2, seed)
        assert not {p.problem_id for p in tr} & {p.problem_id for p in ev}
        assert len(tr) + len(ev) == len(ds_s) and len(ev) > 0


def test_split_keeps_single_problem_in_train():
    _, ds_s = build_pairs([rollout("only", "+-", [["verified", "mismatch"]] * 2)])
    tr, ev = split_dataset(ds_s, 0.2, seed=0)
    assert len(ev) == 0 and len(tr) == len(ds_s) > 0


def test_pair_count_and_audit_random():
    rng = np.random.default_rng(0)
    for k in range(100):
        n_forms = int(rng.integers(1, 6))
        verdicts = [[str(rng.choice(["verified", "mismatch", "not_executed"])) for _ in range(int(rng.integers(0, 6)))]
                    for _ in range(n_forms)]
        ro = rollout(f"q{k}", "+" * n_forms, verdicts)
        ds_f, ds_s = build_pairs([ro])
        pos_f = sum(any(v == "verified" for v in vs) for vs in verdicts if vs)
        neg_f = sum(not any(v == "verified" for v in vs) for vs in verdicts if vs)
        assert len(ds_f) == pos_f * neg_f
        expect_s = sum(vs.count("verified") * (len(vs) - vs.count("verified")) for vs in verdicts)
        assert len(ds_s) == expect_s
        assert audit_pairs([ro], ds_f, ds_s) == []


def test_audit_catches_flipped_pair():
    ro = rollout("p", "+-")
    ds_f, _ = build_pairs([ro])
    flipped = PreferenceDataset(F, tuple(
        PreferencePair(F, p.context, p.rejected, p.chosen,
                       {**p.provenance, "chosen_id": p.provenance["rejected_id"],
                        "rejected_id": p.provenance["chosen_id"]}) for p in ds_f))
    assert len(audit_pairs([ro], flipped)) == len(ds_f) == 1


def test_persistence(tmp_path):
    ros = [rollout("p", "+-", [["verified", "mismatch"], ["not_executed"]])]
    ds_f, ds_s = build_pairs(ros)
    write_pairs(tmp_path / "f.jsonl", ds_f)
    write_pairs(tmp_path / "s.jsonl", ds_s)
    assert read_pairs(tmp_path / "f.jsonl") == ds_f
    assert read_pairs(tmp_path / "s.jsonl") == ds_s
    line = json.loads((tmp_path / "s.jsonl").read_text().splitlines()[0])
    assert set(line) == {"stage", "context", "chosen", "rejected", "provenance"}
    assert {"problem_id", "run_id", "chosen_id", "rejected_id"} <= set(line["provenance"])
    write_rollouts(tmp_path / "r.jsonl", ros)
    assert read_rollouts(tmp_path / "r.jsonl") == ros
    bad = tmp_path / "bad.jsonl"
    bad.write_text((tmp_path / "f.jsonl").read_text() + "{oops\n")
    with pytest.raises(ParseError) as ei:
        read_pairs(bad)
    assert ei.value.line == 2


def test_collect_rollouts_synthetic():
    probs = [Problem(f"s{k}", "max", float(k + 1)) for k in range(4)]
    cfg = PipelineConfig(seed=2)
    ros = collect_rollouts(probs, cfg, 5, SyntheticExecutor(2), run_id="t")
    assert len(ros) == 4 and all(len(r.formulations) == 5 for r in ros)
    assert all(len(fr.solutions) == 5 for r in ros for fr in r.formulations)
    ds_f, ds_s = build_pairs(ros)
    assert len(ds_f) > 0 and len(ds_s) > 0
    assert audit_pairs(ros, ds_f, ds_s) == []
    assert collect_rollouts(probs, cfg, 5, SyntheticExecutor(2), run_id="t") == ros


def test_enumeration_small():
    verdicts = list(Verdict)
    for k in range(4):
        for vs in itertools.product(verdicts, repeat=k):
            outs = [out(v) for v in vs]
            assert (credit_formulation(outs) is POS) == any(v is Verdict.VERIFIED for v in vs)
