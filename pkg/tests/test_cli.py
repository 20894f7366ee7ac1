import json

import numpy as np
import pytest

from grnet.cli import main
from grnet.data import ManifestRecord, load_checkpoint, write_feature_file, write_manifest


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_gradcheck_default_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--scales", "1x1,2x2", "--dim", "8", "--hidden", "4",
                       "--precision", "f64")
    assert code == 0
    assert out.startswith("PASS max_rel_err=")
    assert float(out.split("=")[1].split()[0]) < 1e-4


def test_gradcheck_frozen_edges(capsys):
    code, out, _ = run(capsys, "gradcheck", "--edge-mode", "frozen", "--mask", "intra", "-v")
    assert code == 0 and "layer2.t_in" not in out and "layer1.t_in" in out


def _toy_eval_set(tmp_path):
    """Three queries whose truth ranks 1st, 2nd and 3rd under global cosine."""
    g = {"a": [1.0, 0.0, 0.0], "b": [0.0, 1.0, 0.0], "c": [0.0, 0.0, 1.0]}
    q = {"a": [1.0, 0.1, 0.0], "b": [1.0, 0.5, 0.0], "c": [1.0, 0.6, 0.3]}
    recs = []
    for ident in "abc":
        for role, vec in (("query", q[ident]), ("gallery", g[ident])):
            rid = f"{ident}_{role[0]}"
            write_feature_file(tmp_path / f"{rid}.spyr",
                               np.broadcast_to(np.array(vec)[:, None, None], (3, 3, 3)), "f64")
            recs.append(ManifestRecord(rid, role, ident, f"{rid}.spyr", split="test"))
    write_manifest(tmp_path / "m.jsonl", recs)
    return tmp_path / "m.jsonl"


def test_eval_hand_counted_report(tmp_path, capsys):
    manifest = _toy_eval_set(tmp_path)
    code, out, _ = run(capsys, "eval", "--manifest", manifest, "--baseline", "global-cosine",
                       "--protocol", "E", "--k", "1,2,3", "--report", tmp_path / "r.txt",
                       "--rankings", tmp_path / "rank.tsv")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# config ") and json.loads(lines[0][9:])["scorer"] == "global-cosine"
    assert lines[1:] == ["protocol=E k=1 queries=3 accuracy=0.3333",
                         "protocol=E k=2 queries=3 accuracy=0.6667",
                         "protocol=E k=3 queries=3 accuracy=1.0000"]
    assert (tmp_path / "r.txt").read_text() == out
    assert (tmp_path / "rank.tsv").read_text().splitlines()[2] == "c_q\ta_g b_g c_g"


def test_eval_empty_protocol_is_machine_readable_error(tmp_path, capsys):
    manifest = _toy_eval_set(tmp_path)
    code, out, err = run(capsys, "eval", "--manifest", manifest, "--baseline", "greedy-local",
                         "--protocol", "HO")
    assert code != 0
    assert err.count("\n") == 1 and err.startswith("error code=E_EMPTY_PROTOCOL message=")


def test_synth_train_eval_inspect_pipeline(tmp_path, capsys):
    data = tmp_path / "data"
    code, out, _ = run(capsys, "synth", "--out", data, "--train-identities", "12",
                       "--test-identities", "4", "--distractors", "3", "--channels", "6",
                       "--part-channels", "3", "--occlusion-rate", "0.5")
    assert code == 0
    manifest = data / "manifest.jsonl"
    ckpt = tmp_path / "m.ckpt"
    args = ["train", "--manifest", manifest, "--out", ckpt, "--scales", "1x1,2x2", "--dim", "4",
            "--hidden", "3", "--iterations", "2", "--batch-identities", "4", "--epochs", "1",
            "--steps-per-epoch", "3", "--seed", "5"]
    assert run(capsys, *args)[0] == 0
    log = (tmp_path / "m.log").read_text().splitlines()
    assert log[0].startswith("# config ") and len(log) == 4
    first = ckpt.read_bytes()
    assert run(capsys, *args)[0] == 0
    assert ckpt.read_bytes() == first  # same seed, same checkpoint
    model, header = load_checkpoint(ckpt)
    assert header["run_config"]["seed"] == 5 and model.pyramid.num_nodes == 17

    code, out, _ = run(capsys, "eval", "--manifest", manifest, "--checkpoint", ckpt,
                       "--protocol", "E,HO", "--k", "1,5")
    assert code == 0 and len(out.splitlines()) == 5

    code, out, _ = run(capsys, "inspect", ckpt)
    assert code == 0 and "head.bias" in out
    code, out, _ = run(capsys, "inspect", manifest)
    assert code == 0 and "12 queries" in out
    code, out, _ = run(capsys, "inspect", data / "features" / "id00000_q.spyr")
    assert code == 0 and "C=6" in out


def test_ablate_table(tmp_path, capsys):
    data = tmp_path / "d"
    run(capsys, "synth", "--out", data, "--train-identities", "8", "--test-identities", "3",
        "--distractors", "2", "--channels", "4", "--part-channels", "2")
    code, out, _ = run(capsys, "ablate", "--manifest", data / "manifest.jsonl",
                       "--variants", "global-only,coarse-scales,full", "--seeds", "0,1",
                       "--steps", "2", "--scales", "1x1,2x2,3x3", "--dim", "3", "--hidden", "2",
                       "--iterations", "1", "--batch-identities", "3", "--k", "1,2")
    assert code == 0
    rows = out.splitlines()
    assert rows[0].startswith("# config ") and rows[1].split()[:3] == ["variant", "top1", "top2"]
    assert [r.split()[0] for r in rows[2:]] == ["global-cosine", "global-only", "coarse-scales", "full"]
    assert all(r.split()[-1] == "2" for r in rows[2:])


@pytest.mark.parametrize("argv,code", [
    (["train", "--manifest", "/nonexistent.jsonl", "--out", "x"], "E_MISSING_MANIFEST"),
    (["ablate", "--variants", "bogus"], "E_CONFIG"),
    (["eval", "--manifest", "/nope", "--checkpoint", "/nope.ckpt"], "E_MISSING_CHECKPOINT"),
])
def test_errors_exit_nonzero_with_one_line(capsys, argv, code):
    rc, _, err = run(capsys, *argv)
    assert rc != 0
    assert err.count("\n") == 1 and err.startswith(f"error code={code} ")
