from __future__ import annotations

import json

import pytest

from conftest import TOURISM
from text2db.config import ConfigInvalid, load_config
from text2db.corpus import CorpusInvalid, load_corpus


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("")
    m = load_config(path, environment={}).match
    assert (m.dedup_threshold, m.value_sim_threshold, m.column_sim_threshold, m.numeric_tolerance) == \
        (0.97, 0.8, 0.7, 0.01)


def test_precedence_file_env_flag(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("match:\n  dedup_threshold: 0.9\ncompletion:\n  model: from-file\n")
    cfg = load_config(path, environment={"TEXT2DB_COMPLETION_MODEL": "from-env"},
                      overrides={"match.dedup_threshold": 0.95})
    assert cfg.match.dedup_threshold == 0.95
    assert cfg.completion.model == "from-env"
    assert load_config(path, environment={}).match.dedup_threshold == 0.9


@pytest.mark.parametrize("text", [
    "match:\n  value_sim_threshold: 1.5\n",
    "match:\n  dedup_threshold: zero\n",
    "pipeline:\n  sources: [t, x]\n",
    "pipeline:\n  strategy: fancy\n",
    "pipeline:\n  workers: 0\n",
    "nonsense:\n  key: 1\n",
    "match: 3\n",
    "- a list\n",
    "match: {dedup_threshold: [1\n",
])
def test_invalid_settings(tmp_path, text):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    with pytest.raises(ConfigInvalid):
        load_config(path, environment={})


def test_sources_accept_comma_text():
    cfg = load_config(overrides={"pipeline.sources": "T, s", "pipeline.precedence": "s,t"}, environment={})
    assert cfg.pipeline.sources == ["t", "s"]
    with pytest.raises(ConfigInvalid):
        load_config(overrides={"pipeline.sources": "t,s,l", "pipeline.precedence": "t"}, environment={})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "absent.yaml")


def test_fixture_corpus_loads():
    corpus = load_corpus(TOURISM)
    assert corpus.domain == "tourism" and corpus.central_table == "traveler"
    assert [e.doc_id for e in corpus.entries] == ["doc_001", "doc_002"]
    assert all(len(e.document.paragraphs) == 2 for e in corpus.entries)
    gt = corpus.ground_truth_for(corpus.entries[1])
    assert gt.keys() == [1, 2]
    assert "Aisha Khan" in gt.rows[0]


def test_corpus_without_manifest(tmp_path):
    (tmp_path / "documents").mkdir()
    (tmp_path / "documents" / "b.txt").write_text("Second.")
    (tmp_path / "documents" / "a.txt").write_text("First.\n\nMore.")
    corpus = load_corpus(tmp_path)
    assert [e.doc_id for e in corpus.entries] == ["a", "b"]
    assert corpus.ground_truth_path is None and corpus.ground_truth_for(corpus.entries[0]) is None


def test_corpus_errors(tmp_path):
    with pytest.raises(CorpusInvalid):
        load_corpus(tmp_path / "nowhere")
    (tmp_path / "manifest.json").write_text(json.dumps({"documents": [{"file": "documents/x.txt"}]}))
    with pytest.raises(CorpusInvalid):
        load_corpus(tmp_path)
    (tmp_path / "manifest.json").write_text("{broken")
    with pytest.raises(CorpusInvalid):
        load_corpus(tmp_path)
