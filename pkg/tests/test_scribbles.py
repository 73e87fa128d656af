import json

import pytest

from ivoseval.scribbles import Scribble, ScribbleError, ScribbleSet, load_scribble_file, save_scribble_file


def _set():
    return ScribbleSet("seq", (
        Scribble(2, 1, ((0.1, 0.2), (0.3, 0.4)), "human", 0.5, 2.0),
        Scribble(2, 0, ((0.9, 0.9),), "human", 3.0, 3.5),
    ))


def test_document_roundtrip(tmp_path):
    s = _set()
    doc = s.to_dict(4)
    assert [len(f) for f in doc["scribbles"]] == [0, 0, 2, 0]
    save_scribble_file(s, 4, tmp_path / "a.json")
    assert load_scribble_file(tmp_path / "a.json") == s
    assert s.frames == [2] and s.n_points == 3 and s.labels() == [0, 1]


def test_human_duration():
    assert _set().human_duration() == pytest.approx(2.0)
    untimed = ScribbleSet("seq", (Scribble(0, 1, ((0.5, 0.5),)),))
    assert untimed.human_duration() is None
    assert ScribbleSet("seq").human_duration() is None


def test_pool_file_without_kind_defaults_to_human(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps(
        {"sequence": "x", "scribbles": [[{"path": [[0, 0], [1, 1]], "object_id": 1}]]}
    ))
    assert load_scribble_file(tmp_path / "p.json").scribbles[0].kind == "human"


def test_validation(tmp_path):
    with pytest.raises(ScribbleError):
        Scribble(0, 1, ((1.5, 0.0),))
    with pytest.raises(ScribbleError):
        Scribble(0, 1, ())
    with pytest.raises(ScribbleError):
        Scribble(0, 1, ((0.0, 0.0),), kind="robot")
    with pytest.raises(ScribbleError):
        _set().to_dict(2)
    with pytest.raises(ScribbleError):
        ScribbleSet.from_dict({"sequence": "x", "scribbles": [[{"path": [[0, 0]]}]]})
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ScribbleError):
        load_scribble_file(tmp_path / "bad.json")
