import pytest

from periface import cli
from periface.modelstore import load


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_asm_and_disasm(tmp_path, capsys):
    src = tmp_path / "p.s"
    src.write_text("start: LDI r0, #1\nHALT\n")
    code, _, _ = run(capsys, "asm", src, "-o", tmp_path / "p.bin", "--symbols", tmp_path / "p.sym")
    assert code == 0
    assert (tmp_path / "p.sym").read_text() == "0x00000000 start\n"
    code, out, _ = run(capsys, "disasm", tmp_path / "p.bin")
    assert code == 0 and "HALT" in out


def test_asm_bad_source_exits_1(tmp_path, capsys):
    src = tmp_path / "bad.s"
    src.write_text("FROB r1\n")
    code, _, err = run(capsys, "asm", src)
    assert code == 1 and "bad.s:1" in err


def test_missing_file_is_usage_error(tmp_path, capsys):
    assert run(capsys, "asm", tmp_path / "none.s")[0] == 2
    assert run(capsys, "run")[0] == 2


def test_unknown_corpus_name(capsys):
    assert run(capsys, "run", "--corpus", "nope")[0] == 2


def test_run_stub_hangs_and_expect(capsys):
    code, out, _ = run(capsys, "run", "--corpus", "usart_rx", "--hang-blocks", "2000")
    assert code == 1 and "verdict hang" in out
    assert run(capsys, "run", "--corpus", "usart_rx", "--hang-blocks", "2000",
               "--expect", "hang")[0] == 0


def test_report_without_artifacts(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run(capsys, "report", tmp_path / "empty")[0] == 2
    assert run(capsys, "report", tmp_path / "missing")[0] == 2


@pytest.fixture(scope="module")
def spi_session(tmp_path_factory):
    d = tmp_path_factory.mktemp("spi")
    assert cli.main(["instantiate", "--corpus", "spi", "--out", str(d / "s")]) == 0
    return d / "s"


def test_instantiate_writes_artifacts(spi_session):
    names = {p.name for p in spi_session.iterdir()}
    assert {"model.txt", "session.txt", "timing.txt", "rounds.log", "explore.log"} <= names
    assert load(spi_session / "model.txt").registers


def test_instantiate_same_seed_same_model(spi_session, tmp_path, capsys):
    assert run(capsys, "instantiate", "--corpus", "spi", "--out", tmp_path / "again")[0] == 0
    assert (tmp_path / "again" / "model.txt").read_bytes() == (spi_session / "model.txt").read_bytes()
    assert run(capsys, "model", "diff", spi_session / "model.txt", tmp_path / "again" / "model.txt")[0] == 0


def test_model_show_is_canonical(spi_session, capsys):
    code, out, _ = run(capsys, "model", "show", spi_session / "model.txt")
    assert code == 0 and out == (spi_session / "model.txt").read_text()


def test_model_diff_reports_changes(spi_session, tmp_path, capsys):
    empty = tmp_path / "empty.txt"
    text = (spi_session / "model.txt").read_text()
    empty.write_text(text.split("[registers]")[0] + "[registers]\n")
    code, out, _ = run(capsys, "model", "diff", empty, spi_session / "model.txt")
    assert code == 1 and out.startswith("+ 0x")


def test_model_parse_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("[meta]\nformat_version 1\n[registers]\n0x40004400 XR 0 0x40004400 0 0 0 0 0\n")
    assert run(capsys, "model", "show", bad)[0] == 2


def test_fuzz_compare_and_report(spi_session, tmp_path, capsys):
    model = spi_session / "model.txt"
    code, out, _ = run(capsys, "fuzz", "--corpus", "spi", "--model", model, "--fixed",
                       "--execs", "200", "--out", spi_session / "fuzz")
    assert code == 0 and "execs 200" in out
    inputs = spi_session / "fuzz" / "queue"
    code, out, _ = run(capsys, "compare", "--corpus", "spi", "--model-a", "stub",
                       "--model-b", model, "--inputs", inputs, "--out", spi_session / "compare.txt",
                       "--hang-blocks", "5000")
    assert code == 0
    assert run(capsys, "compare", "--corpus", "spi", "--model-a", model, "--model-b", model,
               "--inputs", inputs, "--min-ratio", "2")[0] == 1
    code, csv1, _ = run(capsys, "report", spi_session, "--csv")
    assert code == 0
    header, row = csv1.splitlines()
    assert header.startswith("firmware,") and row.startswith("spi,")
    assert row.split(",")[4] == "100.0"
    assert run(capsys, "report", spi_session, "--csv")[1] == csv1
    code, text, _ = run(capsys, "report", spi_session)
    assert "spi rounds:" in text


def test_fuzz_needs_seeds(tmp_path, capsys):
    img = tmp_path / "p.s"
    img.write_text(".word 0x2000F000, start\n.org 0x88\nstart: HALT\n")
    assert run(capsys, "fuzz", "--image", img, "--out", tmp_path / "o")[0] == 2


def test_fuzz_replay(tmp_path, capsys):
    (tmp_path / "in").mkdir()
    (tmp_path / "in" / "a.bin").write_bytes(b"\x01\x02")
    code, out, _ = run(capsys, "fuzz", "--corpus", "gpio", "--input-dir", tmp_path / "in",
                       "--out", tmp_path / "o")
    assert code == 0 and out.startswith("a.bin ")


def test_corpus_build(tmp_path, capsys):
    code, _, _ = run(capsys, "corpus", "build", "--out", tmp_path)
    assert code == 0 and (tmp_path / "usart_rx.bin").is_file()


def test_corpus_check_subset(capsys):
    code, out, _ = run(capsys, "corpus", "check", "--only", "gpio", "--mutants", "3")
    assert code == 0 and "1/1 firmware match" in out


def test_isa_doc(tmp_path, capsys):
    assert run(capsys, "isa", "doc", "-o", tmp_path / "isa.md")[0] == 0
    assert "LDW" in (tmp_path / "isa.md").read_text()
