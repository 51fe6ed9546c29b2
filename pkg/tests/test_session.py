from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import program
from periface.fuzz import Corpus
from periface.machine import Firmware
from periface.modelstore import dumps
from periface.session import STABLE_RUNS, Session, fuzz_instances, instantiate, merge_corpora


def test_firmware_without_mmio_needs_no_rounds():
    s = instantiate(program("LDI r0, #1\nHALT\n"))
    assert s.rounds == [] and s.events == []
    assert s.stable and s.stable_at == STABLE_RUNS


def test_instantiation_is_deterministic(manifest):
    e = manifest["usart_rx"]
    a = instantiate(e.image(), seed=5, seeds=e.seeds)
    b = instantiate(e.image(), seed=5, seeds=e.seeds)
    assert dumps(a.model) == dumps(b.model)
    assert a.rounds_log() == b.rounds_log()


def test_rounds_record_changes(sessions):
    s = sessions["usart_rx"]
    assert s.rounds and all(r.changes or r.explorations for r in s.rounds)
    assert s.rounds_to_stable <= 5


def test_session_write(tmp_path, sessions):
    sessions["spi"].write(tmp_path)
    assert {p.name for p in tmp_path.iterdir()} == {"model.txt", "rounds.log", "explore.log"}
    assert "stable after run" in (tmp_path / "rounds.log").read_text()


def test_fuzz_instances_split_execs(sessions, manifest):
    e = manifest["usart_rx"]
    res = fuzz_instances(Firmware(e.image()), sessions["usart_rx"].model, e.seeds, 1, 101,
                         jobs=1, mode="fixed")
    assert [r.stats.execs for r in res] == [101]


def test_fuzz_instances_parallel_deterministic(sessions, manifest):
    e = manifest["usart_rx"]
    fw = Firmware(e.image())
    model = sessions["usart_rx"].model

    def run():
        res = fuzz_instances(fw, model, e.seeds, 2, 60, jobs=2, mode="fixed")
        return [(r.stats.execs, r.stats.render(), r.corpus.queue) for r in res]
    first = run()
    assert [x[0] for x in first] == [30, 30]
    assert run() == first


corpora = st.builds(
    lambda q, c: Corpus(queue=q, seeds=q[:1], crashes={("MemPerm", k): (v, None) for k, v in c.items()}),
    st.lists(st.binary(max_size=4), max_size=4),
    st.dictionaries(st.integers(0, 3), st.binary(max_size=3), max_size=3))


@settings(max_examples=100)
@given(st.lists(corpora, max_size=4), st.randoms())
def test_merge_is_order_independent(cs, rnd):
    shuffled = list(cs)
    rnd.shuffle(shuffled)
    a, b = merge_corpora(cs), merge_corpora(shuffled)
    assert a.queue == b.queue and a.seeds == b.seeds
    assert {k: v[0] for k, v in a.crashes.items()} == {k: v[0] for k, v in b.crashes.items()}


def test_reused_model_session_stays_quiet(sessions, manifest):
    e = manifest["spi"]
    s = Session(Firmware(e.image()), seed=9, model=sessions["spi"].model.copy())
    s.instantiate(seeds=e.seeds)
    assert s.rounds == [] and s.runs == STABLE_RUNS
