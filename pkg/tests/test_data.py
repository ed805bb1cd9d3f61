import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapter_splade.data import (
    PAD,
    SEP,
    START,
    UNK,
    DataFormatError,
    Tokenizer,
    TrainingExample,
    load_collection,
    load_qrels,
    load_queries,
    load_run,
    load_teacher_triplets,
    load_triplets,
    write_id_text,
    write_qrels,
    write_run,
    write_triplets,
)

ids = st.text("abcdefghij0123456789", min_size=1, max_size=6)


class TestLoaders:
    def test_two_line_collection(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("D1\tthe first  doc\nD2\tsecond\n")
        assert load_collection(p) == {"D1": "the first  doc", "D2": "second"}

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_queries(tmp_path / "nope.tsv")

    def test_duplicate_and_malformed_lines(self, tmp_path):
        p = tmp_path / "q.tsv"
        p.write_text("Q1\ta\nno tab here\nQ1\tb\n")
        with pytest.raises(DataFormatError, match=r"line 2: .*line 3: duplicate id 'Q1'"):
            load_queries(p)

    def test_triplet_unknown_doc_names_line(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("Q1\tD1\tD2\nQ1\tD1\tD9\n")
        with pytest.raises(DataFormatError, match=r"line 2: unknown document id 'D9'"):
            load_triplets(p, {"Q1": "x"}, {"D1": "a", "D2": "b"})

    def test_triplet_unknown_query(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("Q7\tD1\tD2\n")
        with pytest.raises(DataFormatError, match="unknown query id 'Q7'"):
            load_triplets(p, {"Q1": "x"}, None)

    def test_teacher_scores(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("Q1\tD1\tD2\t3.5\t1.0\n")
        (ex,) = load_teacher_triplets(p)
        assert ex == TrainingExample("Q1", "D1", "D2", 3.5, 1.0)
        assert ex.teacher_margin == 2.5
        p.write_text("Q1\tD1\tD2\thigh\t1.0\n")
        with pytest.raises(DataFormatError, match="non-numeric"):
            load_teacher_triplets(p)

    def test_qrels_errors(self, tmp_path):
        p = tmp_path / "r.txt"
        p.write_text("Q1 0 D1 1\nQ1 0 D1 2\nQ2 0 D3 x\nQ3 0 D4 -1\n")
        with pytest.raises(DataFormatError) as err:
            load_qrels(p)
        assert "line 2" in str(err.value) and "line 3" in str(err.value) and "line 4" in str(err.value)

    def test_run_rank_gap(self, tmp_path):
        p = tmp_path / "run.txt"
        p.write_text("Q1 Q0 D1 1 2.0 t\nQ1 Q0 D2 3 1.0 t\n")
        with pytest.raises(DataFormatError, match="1..n"):
            load_run(p)


class TestRoundTrips:
    @given(st.dictionaries(ids, st.dictionaries(ids, st.integers(0, 3), min_size=1, max_size=4), max_size=5))
    @settings(max_examples=40, deadline=None)
    def test_qrels(self, tmp_path_factory, qrels):
        p = tmp_path_factory.mktemp("q") / "qrels.txt"
        write_qrels(p, qrels)
        assert load_qrels(p) == {q: d for q, d in qrels.items() if d}

    def test_run_lossless(self, tmp_path):
        run = {"Q1": [("D3", 2.5), ("D1", 0.1 + 0.2)], "Q2": [("D9", 1e-17)]}
        write_run(tmp_path / "run.txt", run)
        assert load_run(tmp_path / "run.txt") == run

    def test_triplets_and_id_text(self, tmp_path):
        ex = [TrainingExample("Q1", "D1", "D2"), TrainingExample("Q2", "D2", "D1")]
        write_triplets(tmp_path / "t.tsv", ex)
        assert load_triplets(tmp_path / "t.tsv") == ex
        table = {"D1": "alpha beta", "D2": "gamma"}
        write_id_text(tmp_path / "c.tsv", table)
        assert load_collection(tmp_path / "c.tsv") == table

    def test_teacher_triplets_exact_floats(self, tmp_path):
        ex = [TrainingExample("Q1", "D1", "D2", 0.1 + 0.2, -1 / 3)]
        write_triplets(tmp_path / "t.tsv", ex)
        assert load_teacher_triplets(tmp_path / "t.tsv") == ex


class TestTokenizer:
    def test_reserved_ids(self):
        tok = Tokenizer(["b", "a"])
        assert tok.vocab[:4] == ["[PAD]", "[START]", "[SEP]", "[UNK]"]
        assert (PAD, START, SEP, UNK) == (0, 1, 2, 3)
        assert tok.tokenize("B a zzz") == [4, 5, UNK]

    def test_case_sensitive_flag(self):
        tok = Tokenizer(["A"], lowercase=False)
        assert tok.tokenize("A a") == [4, UNK]

    def test_from_texts_sorted_and_deterministic(self):
        a = Tokenizer.from_texts(["c b", "a c"])
        b = Tokenizer.from_texts(["a c", "c b"])
        assert a.to_list() == b.to_list() == ["a", "b", "c"]

    def test_save_load(self, tmp_path):
        tok = Tokenizer(["x", "y", "z"])
        tok.save(tmp_path / "v.txt")
        assert Tokenizer.load(tmp_path / "v.txt").vocab == tok.vocab

    def test_encode_pair_segments_and_truncation(self):
        tok = Tokenizer(["q1", "q2", "d1", "d2", "d3"])
        seq = tok.encode_pair("q1 q2", "d1 d2 d3", max_len=6)
        assert seq.ids.tolist() == [START, 4, 5, SEP, 6, 7]
        assert seq.segments.tolist() == [0, 0, 0, 0, 1, 1]
