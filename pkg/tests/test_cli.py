"""Command-line workflows over the planted dataset."""

import io
import json
import warnings

import numpy as np
import pytest

from cqe import cli
from cqe.core import TokenEmbeddingMatrix, save_token_matrices
from cqe.evaluation import read_run, write_qrels, write_run
from cqe.fusion import FusionConfig, rrf
from cqe.ranking import RankedList
from cqe.synth import write_planted_dataset
from cqe.trainer import load_weak_labels, save_weak_labels, WeakLabelSet


@pytest.fixture(scope="session")
def workspace(tmp_path_factory, planted):
    """Planted dataset files plus CLI-built index, labels, and encoders."""
    root = tmp_path_factory.mktemp("cli")
    paths = write_planted_dataset(planted, str(root))
    paths["root"] = str(root)
    paths["index"] = str(root / "index.bin")
    assert cli.main(["index-sparse", "--corpus", paths["corpus"], "--output", paths["index"]]) == 0

    paths["labels"] = str(root / "labels.jsonl")
    assert (
        cli.main(
            [
                "build-weak-labels",
                "--corpus", paths["corpus"],
                "--index", paths["index"],
                "--store", paths["store"],
                "--sessions", paths["sessions"],
                "--output", paths["labels"],
            ]
        )
        == 0
    )
    held = set(planted.held_out_qids)
    all_labels = load_weak_labels(paths["labels"])
    paths["labels_train"] = str(root / "labels_train.jsonl")
    save_weak_labels(
        WeakLabelSet([t for t in all_labels.turns if t.qid not in held]), paths["labels_train"]
    )

    common = [
        "--labels", paths["labels_train"],
        "--sessions", paths["sessions"],
        "--corpus", paths["corpus"],
        "--store", paths["store"],
        "--seed", "0",
    ]
    paths["encoder"] = str(root / "encoder.json")
    assert cli.main(["train-toy", *common, "--output", paths["encoder"]]) == 0
    paths["encoder_untrained"] = str(root / "untrained.json")
    assert cli.main(["train-toy", *common, "--steps", "0", "--output", paths["encoder_untrained"]]) == 0
    return paths


def run_cli(argv):
    return cli.main(argv)


class TestIndexAndSearch:
    def test_index_summary_printed(self, workspace, capsys, tmp_path):
        out = str(tmp_path / "again.bin")
        assert run_cli(["index-sparse", "--corpus", workspace["corpus"], "--output", out]) == 0
        assert "indexed 100 passages" in capsys.readouterr().out

    def test_search_sparse_produces_clean_run(self, workspace, tmp_path):
        queries = tmp_path / "queries.jsonl"
        queries.write_text(
            json.dumps({"qid": "q1", "text": "topic0 overview"})
            + "\n"
            + json.dumps({"qid": "q2", "text": "word1 word2"})
            + "\n"
        )
        out = str(tmp_path / "run.txt")
        assert (
            run_cli(
                ["search-sparse", "--index", workspace["index"], "--queries", str(queries),
                 "--k", "20", "--output", out]
            )
            == 0
        )
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            runs = read_run(out)
        assert set(runs) == {"q1", "q2"}
        assert runs["q1"].entries[0].docid.startswith("P00")

    def test_search_dense_encoder_route(self, workspace, tmp_path):
        out = str(tmp_path / "dense.txt")
        assert (
            run_cli(
                ["search-dense", "--store", workspace["store"], "--encoder", workspace["encoder"],
                 "--sessions", workspace["sessions"], "--k", "10", "--output", out]
            )
            == 0
        )
        runs = read_run(out)
        assert len(runs) == 30
        assert all(len(r) == 10 for r in runs.values())


class TestHybridConsistency:
    def test_alpha_zero_matches_dense(self, workspace, tmp_path):
        dense_out = str(tmp_path / "dense.txt")
        hybrid_out = str(tmp_path / "hybrid.txt")
        base = ["--store", workspace["store"], "--encoder", workspace["encoder"],
                "--sessions", workspace["sessions"]]
        assert run_cli(["search-dense", *base, "--k", "10", "--output", dense_out]) == 0
        assert (
            run_cli(
                ["search-hybrid", *base, "--index", workspace["index"], "--alpha", "0",
                 "--depth", "100", "--k", "10", "--output", hybrid_out]
            )
            == 0
        )
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            dense_runs = read_run(dense_out)
            hybrid_runs = read_run(hybrid_out)
        for qid in dense_runs:
            assert hybrid_runs[qid].docids() == dense_runs[qid].docids()


class TestRewrite:
    def matrices_file(self, tmp_path):
        context = np.diag([9.0, 2.0, 1.0])
        query = np.ones((2, 3))
        matrix = TokenEmbeddingMatrix(
            ["history", "start", "end", "why", "that"], np.vstack([context, query]), 3
        )
        path = str(tmp_path / "matrices.jsonl")
        save_token_matrices({"q1": matrix}, path)
        return path

    def test_gamma_flag_controls_selection(self, workspace, tmp_path):
        matrices = self.matrices_file(tmp_path)
        out = str(tmp_path / "rewritten.jsonl")
        assert run_cli(["rewrite", "--matrices", matrices, "--gamma", "5", "--output", out]) == 0
        record = json.loads(open(out).read())
        assert record == {"qid": "q1", "text": "why that history"}

    def test_gamma_zero_keeps_all(self, workspace, tmp_path):
        matrices = self.matrices_file(tmp_path)
        out = str(tmp_path / "rewritten.jsonl")
        assert run_cli(["rewrite", "--matrices", matrices, "--gamma", "0", "--output", out]) == 0
        record = json.loads(open(out).read())
        assert record["text"] == "why that history start end"


class TestFuseRRF:
    def test_matches_library_fusion(self, tmp_path):
        rng = np.random.default_rng(70)
        run_a = {"q1": RankedList.from_scores([(f"d{i}", float(rng.uniform())) for i in range(8)], "a")}
        run_b = {"q1": RankedList.from_scores([(f"d{i}", float(rng.uniform())) for i in range(4, 12)], "b")}
        path_a, path_b = str(tmp_path / "a.txt"), str(tmp_path / "b.txt")
        write_run(path_a, run_a)
        write_run(path_b, run_b)
        out = str(tmp_path / "fused.txt")
        assert run_cli(["fuse-rrf", "--runs", path_a, path_b, "--output", out]) == 0
        fused = read_run(out)["q1"]
        expected = rrf([run_a["q1"], run_b["q1"]], FusionConfig())
        assert fused.docids() == expected.docids()
        for got, want in zip(fused, expected):
            assert got.score == pytest.approx(want.score, rel=1e-12)


class TestEval:
    def test_ideal_run_prints_perfect_ndcg(self, tmp_path, capsys):
        qrels = {"q1": {"a": 4, "b": 2, "c": 1}, "q2": {"x": 3, "y": 2}}
        qrels_path = str(tmp_path / "qrels.txt")
        write_qrels(qrels, qrels_path)
        runs = {
            qid: RankedList.from_scores(
                [(d, float(g)) for d, g in judged.items()], "ideal"
            )
            for qid, judged in qrels.items()
        }
        run_path = str(tmp_path / "ideal.txt")
        write_run(run_path, runs)
        assert run_cli(["eval", "--run", run_path, "--qrels", qrels_path, "--metric", "ndcg"]) == 0
        out = capsys.readouterr().out
        assert "mean nDCG 1.000" in out

    def test_recall_metric_with_cutoff(self, tmp_path, capsys):
        qrels = {"q1": {"a": 2, "b": 3, "c": 0}}
        qrels_path = str(tmp_path / "qrels.txt")
        write_qrels(qrels, qrels_path)
        run_path = str(tmp_path / "run.txt")
        write_run(run_path, {"q1": RankedList.from_scores([("a", 2.0), ("z", 1.0)], "t")})
        assert (
            run_cli(["eval", "--run", run_path, "--qrels", qrels_path,
                     "--metric", "recall", "--cutoff", "10"]) == 0
        )
        assert "mean recall@10 0.500" in capsys.readouterr().out

    def test_missing_run_errors(self, tmp_path, capsys):
        qrels_path = str(tmp_path / "qrels.txt")
        write_qrels({"q1": {"a": 2}}, qrels_path)
        rc = run_cli(["eval", "--run", str(tmp_path / "absent.txt"), "--qrels", qrels_path])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestCompare:
    def test_reports_wins_and_significance(self, tmp_path, capsys):
        qrels = {f"q{i}": {"a": 3, "b": 2} for i in range(6)}
        qrels_path = str(tmp_path / "qrels.txt")
        write_qrels(qrels, qrels_path)
        better = {q: RankedList.from_scores([("a", 2.0), ("b", 1.0)], "s") for q in qrels}
        worse = {q: RankedList.from_scores([("x", 2.0), ("a", 1.0)], "b") for q in qrels}
        run_a, run_b = str(tmp_path / "a.txt"), str(tmp_path / "b.txt")
        write_run(run_a, better)
        write_run(run_b, worse)
        assert (
            run_cli(["compare", "--run", run_a, "--baseline", run_b,
                     "--qrels", qrels_path, "--metric", "ndcg@3"]) == 0
        )
        out = capsys.readouterr().out
        assert "wins 6 ties 0 losses 0" in out
        assert "t = " in out and "p = " in out


class TestTrainingPipeline:
    def recall_at_10(self, workspace, encoder_path, tmp_path, name):
        run_path = str(tmp_path / f"{name}.txt")
        assert (
            run_cli(
                ["search-dense", "--store", workspace["store"], "--encoder", encoder_path,
                 "--sessions", workspace["sessions"], "--k", "10", "--output", run_path]
            )
            == 0
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # non-held-out turns are unjudged
            run = read_run(run_path)
            from cqe.evaluation import read_qrels, recall_at

            report = recall_at(run, read_qrels(workspace["qrels_held_out"]), cutoff=10)
        return report.mean

    def test_trained_encoder_beats_untrained(self, workspace, tmp_path):
        trained = self.recall_at_10(workspace, workspace["encoder"], tmp_path, "trained")
        untrained = self.recall_at_10(workspace, workspace["encoder_untrained"], tmp_path, "untrained")
        assert trained > untrained


class TestConverse:
    SCRIPT = "topic0 filler overview\nwhy did it change over time\nreset\ntopic1 filler overview\nexit\n"

    def converse(self, workspace, monkeypatch, capsys):
        monkeypatch.setattr("sys.stdin", io.StringIO(self.SCRIPT))
        rc = run_cli(
            ["converse", "--index", workspace["index"], "--store", workspace["store"],
             "--encoder", workspace["encoder"], "--k", "5"]
        )
        assert rc == 0
        return capsys.readouterr().out

    def test_first_turn_rewrite_is_raw_query(self, workspace, monkeypatch, capsys):
        out = self.converse(workspace, monkeypatch, capsys)
        assert "turn 1 (0 context tokens)" in out
        assert "rewrite: topic0 filler overview" in out

    def test_reset_clears_context(self, workspace, monkeypatch, capsys):
        out = self.converse(workspace, monkeypatch, capsys)
        assert "context cleared" in out
        # after reset the next utterance is turn 1 again
        assert out.count("turn 1 (0 context tokens)") == 2
        assert "turn 2 (3 context tokens)" in out

    def test_replay_is_byte_identical(self, workspace, monkeypatch, capsys):
        first = self.converse(workspace, monkeypatch, capsys)
        second = self.converse(workspace, monkeypatch, capsys)
        assert first == second


class TestConfig:
    def test_module_defaults(self):
        cfg = cli.EngineConfig()
        assert cfg.bm25.k1 == 0.82 and cfg.bm25.b == 0.68
        assert cfg.rewrite.gamma == 10.5
        assert cfg.hybrid_rewrite.gamma == 12.0
        assert cfg.fusion.alpha == 0.1 and cfg.fusion.rrf_k == 60
        assert cfg.train.tau == 1.0

    def test_from_file_and_flag_override(self, workspace, tmp_path, capsys):
        config = {
            "paths": {"corpus": workspace["corpus"]},
            "rewrite": {"gamma": 3.0},
            "bm25": {"k1": 1.2},
        }
        config_path = str(tmp_path / "config.json")
        open(config_path, "w").write(json.dumps(config))
        cfg = cli.EngineConfig.from_file(config_path)
        assert cfg.rewrite.gamma == 3.0 and cfg.bm25.k1 == 1.2
        assert cfg.corpus == workspace["corpus"]

        # flags beat config: index with config (k1=1.2) but override b
        out = str(tmp_path / "idx.bin")
        assert run_cli(["index-sparse", "--config", config_path, "--output", out, "--b", "0.5"]) == 0
        from cqe.sparse import load_index

        index = load_index(out)
        assert index.config.k1 == 1.2 and index.config.b == 0.5

    def test_unknown_config_keys_rejected(self, tmp_path):
        config_path = str(tmp_path / "config.json")
        open(config_path, "w").write(json.dumps({"fusion": {"alpha": 0.1, "zeta": 1}}))
        with pytest.raises(ValueError, match="zeta"):
            cli.EngineConfig.from_file(config_path)

    def test_env_var_fallback(self, workspace, tmp_path, monkeypatch, capsys):
        config = {"paths": {"corpus": workspace["corpus"]}}
        config_path = str(tmp_path / "config.json")
        open(config_path, "w").write(json.dumps(config))
        monkeypatch.setenv(cli.ENV_CONFIG, config_path)
        out = str(tmp_path / "idx.bin")
        assert run_cli(["index-sparse", "--output", out]) == 0
        assert "indexed 100 passages" in capsys.readouterr().out


class TestFileBackedMatrices:
    def matrices_for(self, planted, encoder_path, tmp_path, qids):
        from cqe.trainer import ToyQueryEncoder

        encoder = ToyQueryEncoder.load(encoder_path)
        by_qid = {s.qid(i): (s, i) for s in planted.sessions for i in range(len(s.turns))}
        matrices = {}
        for qid in qids:
            session, i = by_qid[qid]
            context, query = session.tokens_for_turn(i)
            matrices[qid] = encoder.encode(context, query)
        path = str(tmp_path / "matrices.jsonl")
        save_token_matrices(matrices, path)
        return path

    def test_search_dense_matrices_route_matches_encoder_route(
        self, workspace, planted, tmp_path
    ):
        qids = [s.qid(i) for s in planted.sessions[:3] for i in range(len(s.turns))]
        matrices = self.matrices_for(planted, workspace["encoder"], tmp_path, qids)
        via_matrices = str(tmp_path / "via_matrices.txt")
        assert (
            run_cli(["search-dense", "--store", workspace["store"], "--matrices", matrices,
                     "--k", "5", "--output", via_matrices]) == 0
        )
        via_encoder = str(tmp_path / "via_encoder.txt")
        assert (
            run_cli(["search-dense", "--store", workspace["store"],
                     "--encoder", workspace["encoder"], "--sessions", workspace["sessions"],
                     "--k", "5", "--output", via_encoder]) == 0
        )
        from_matrices = read_run(via_matrices)
        from_encoder = read_run(via_encoder)
        for qid in qids:
            assert from_matrices[qid].docids() == from_encoder[qid].docids()

    def test_converse_with_matrix_file(self, workspace, planted, tmp_path, monkeypatch, capsys):
        from cqe.trainer import ToyQueryEncoder

        encoder = ToyQueryEncoder.load(workspace["encoder"])
        first = encoder.encode([], ["topic0", "filler", "overview"])
        second = encoder.encode(["topic0", "filler", "overview"], ["why", "did", "it", "change"])
        path = str(tmp_path / "turns.jsonl")
        save_token_matrices({"turn_1": first, "turn_2": second}, path)

        script = "topic0 filler overview\nwhy did it change\nexit\n"
        monkeypatch.setattr("sys.stdin", io.StringIO(script))
        rc = run_cli(
            ["converse", "--index", workspace["index"], "--store", workspace["store"],
             "--matrices", path, "--k", "3"]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "turn 1 (0 context tokens)" in out
        assert "turn 2 (3 context tokens)" in out

    def test_converse_missing_turn_matrix_errors(self, workspace, planted, tmp_path, monkeypatch, capsys):
        from cqe.trainer import ToyQueryEncoder

        encoder = ToyQueryEncoder.load(workspace["encoder"])
        path = str(tmp_path / "turns.jsonl")
        save_token_matrices({"turn_1": encoder.encode([], ["topic0"])}, path)
        monkeypatch.setattr("sys.stdin", io.StringIO("topic0\nsecond utterance\n"))
        rc = run_cli(
            ["converse", "--index", workspace["index"], "--store", workspace["store"],
             "--matrices", path]
        )
        assert rc == 1
        assert "turn_2" in capsys.readouterr().err
