"""Command-line entry point: ``periface <command> ...``.

Exit status: 0 success, 1 the result deviates from what was expected,
2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from pathlib import Path

from . import __version__
from .asm import AsmError, assemble_program, disassemble
from .corpus_check import bug_hunt, categorization, check_corpus, entry_budgets, render
from .explore import NoQualifiedCandidate
from .fuzz import (HANG_BLOCKS, MAX_INSNS, OK, Budgets, FuzzStats, coverage_compare, run_once,
                   write_artifacts)
from .irq import DEFAULT_INTERVAL, FiringStrategy, parse_script
from .isa import reference
from .machine import Firmware
from .manifest import (CorpusManifest, ManifestError, build, hash_mismatches, image_hash,
                       load_manifest)
from .modelstore import (FirmwareMismatch, InstantiatedModel, InvariantViolation, ParseError,
                         VersionMismatch, diff, dumps, load, loads, save)
from .session import Session, fuzz_instances, merge_corpora

EXIT_OK, EXIT_DEVIATION, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class MissingArtifacts(UsageError):
    pass


# -- helpers -----------------------------------------------------------

def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise UsageError(f"{path}: {e.strerror}") from None


def load_image(path) -> Firmware:
    """A flat image, or assembly source when the name ends in ``.s``."""
    p = Path(path)
    if p.suffix == ".s":
        try:
            text = p.read_text()
        except OSError as e:
            raise UsageError(f"{p}: {e.strerror}") from None
        return Firmware(assemble_program(text, p.name).image)
    return Firmware(_read_bytes(p))


def input_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"{d}: not a directory")
    return sorted(p for p in d.iterdir() if p.is_file())


def read_inputs(directory) -> list[bytes]:
    return [p.read_bytes() for p in input_files(directory)]


def _manifest(args) -> CorpusManifest:
    return load_manifest(getattr(args, "manifest", None))


def strategy_of(args) -> FiringStrategy:
    if args.no_irq:
        return FiringStrategy.none()
    if args.irq_script:
        try:
            return parse_script(Path(args.irq_script).read_text())
        except OSError as e:
            raise UsageError(f"{args.irq_script}: {e.strerror}") from None
    return FiringStrategy.round_robin(args.irq_interval)


def budgets_of(args, entry=None) -> Budgets:
    b = Budgets(args.hang_blocks or HANG_BLOCKS, args.max_insns)
    if entry is not None and args.hang_blocks is None:
        b = entry_budgets(entry, b)
    return b


def target_of(args):
    """(firmware, manifest entry or None) from ``--image`` or ``--corpus``."""
    if args.corpus:
        man = _manifest(args)
        if args.corpus not in man.entries:
            raise UsageError(f"no corpus firmware named {args.corpus!r}")
        entry = man[args.corpus]
        return Firmware(entry.image()), entry
    if not args.image:
        raise UsageError("one of --image or --corpus is required")
    return load_image(args.image), None


def load_model(path, fw: Firmware) -> InstantiatedModel:
    if path == "stub":
        return InstantiatedModel(firmware_hash=fw.sha256)
    try:
        return load(path, fw.sha256)
    except OSError as e:
        raise UsageError(f"{path}: {e.strerror}") from None


def _write(path, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


def _kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition(" ")
            out[k] = v.strip()
    return out


# -- commands ----------------------------------------------------------

def cmd_asm(args) -> int:
    try:
        src = Path(args.source).read_text()
    except OSError as e:
        raise UsageError(f"{args.source}: {e.strerror}") from None
    try:
        asm = assemble_program(src, str(args.source))
    except AsmError as e:
        print(e, file=sys.stderr)
        return EXIT_DEVIATION  # the assembler's own contract: 0 ok, 1 bad source
    out = Path(args.output or Path(args.source).with_suffix(".bin"))
    out.write_bytes(asm.image)
    if args.symbols:
        Path(args.symbols).write_text(asm.symbol_map())
    print(f"{out}: {len(asm.image)} bytes sha256 {image_hash(asm.image)}")
    return EXIT_OK


def cmd_disasm(args) -> int:
    sys.stdout.write(disassemble(_read_bytes(args.image)))
    return EXIT_OK


def cmd_run(args) -> int:
    fw, entry = target_of(args)
    model = load_model(args.model, fw) if args.model else None
    data = _read_bytes(args.input) if args.input else b""
    mode = "stub" if model is None else "fixed"
    rep = run_once(fw, model or InstantiatedModel(), data, strategy_of(args),
                   budgets_of(args, entry), mode=mode)
    sys.stdout.write(rep.render())
    if rep.fired:
        print("fired " + " ".join(f"{bb}:{irq}" for bb, irq in rep.fired))
    expected = args.expect or (entry.expect if entry else None)
    if expected and rep.verdict != expected:
        return EXIT_DEVIATION
    if entry and expected == OK and rep.markers != entry.markers:
        return EXIT_DEVIATION
    return EXIT_OK


def cmd_instantiate(args) -> int:
    fw, entry = target_of(args)
    seeds = list(entry.seeds) if entry else []
    if args.seeds:
        seeds = read_inputs(args.seeds)
    s = Session(fw, args.seed, strategy_of(args), budgets_of(args, entry), args.jobs)
    t0 = time.perf_counter()
    try:
        s.instantiate(max_runs=args.max_runs, seeds=seeds)
    except NoQualifiedCandidate as e:
        print(f"error: no qualified candidate for {e.ctx}", file=sys.stderr)
        for r in e.results:
            print(f"  {r.brief()}", file=sys.stderr)
        return EXIT_DEVIATION
    seconds = time.perf_counter() - t0
    out = Path(args.out)
    s.write(out)
    info = [f"name {entry.name if entry else '-'}", f"firmware_hash {fw.sha256}",
            f"seed {args.seed}", f"runs {s.runs}", f"rounds {len(s.rounds)}",
            f"rounds_to_stable {s.rounds_to_stable}",
            f"stable_at {s.stable_at if s.stable else '-'}", f"explorations {len(s.events)}"]
    _write(out / "session.txt", "\n".join(info) + "\n")
    _write(out / "timing.txt", f"instantiate_seconds {seconds:.3f}\n")
    sys.stdout.write(s.rounds_log())
    return EXIT_OK if s.stable else EXIT_DEVIATION


def cmd_fuzz(args) -> int:
    fw, entry = target_of(args)
    model = load_model(args.model, fw) if args.model else InstantiatedModel(
        firmware_hash=fw.sha256, session_seed=args.seed)
    strategy, budgets = strategy_of(args), budgets_of(args, entry)
    out = Path(args.out)
    if args.input_dir:
        return _replay(fw, model, strategy, budgets, args, out)
    seeds = read_inputs(args.seeds) if args.seeds else (list(entry.seeds) if entry else [])
    if not seeds:
        raise UsageError("fuzzing needs at least one seed input (--seeds DIR)")
    mode = "fixed" if args.fixed else "on_demand"
    t0 = time.perf_counter()
    results = fuzz_instances(fw, model, seeds, args.seed, args.execs, args.jobs,
                             strategy=strategy, budgets=budgets, mode=mode)
    seconds = time.perf_counter() - t0
    if len(results) == 1:
        r = results[0]
        write_artifacts(out, r.corpus, r.stats)
        save(r.model, out / "model.txt")
        stats = [r.stats]
    else:
        for r in results:
            write_artifacts(out / f"instance_{r.instance}", r.corpus, r.stats)
            save(r.model, out / f"instance_{r.instance}" / "model.txt")
        merged = merge_corpora(r.corpus for r in results)
        total = FuzzStats(
            execs=sum(r.stats.execs for r in results),
            edges=max(r.stats.edges for r in results),
            coverage_digest="-",
            blocks=frozenset().union(*(r.stats.blocks for r in results)))
        for r in results:
            for k, v in r.stats.verdicts.items():
                total.verdicts[k] = total.verdicts.get(k, 0) + v
        write_artifacts(out, merged, total)
        stats = [r.stats for r in results]
    execs = sum(st.execs for st in stats)
    _write(out / "timing.txt", f"fuzz_seconds {seconds:.3f}\nexecs_per_second {execs / seconds:.1f}\n")
    sys.stdout.write((out / "stats.txt").read_text())
    return EXIT_OK


def _replay(fw, model, strategy, budgets, args, out: Path) -> int:
    """Run every file of ``--input-dir`` once; a report per input."""
    lines = []
    for p in input_files(args.input_dir):
        rep = run_once(fw, model, p.read_bytes(), strategy, budgets,
                       mode="fixed" if args.model else "stub", strict_input=True)
        lines.append(f"{p.name} {rep.verdict} pc=0x{rep.pc or 0:08x} "
                     f"markers={rep.markers.decode('latin-1')!r} coverage={rep.coverage_digest}")
    _write(out / "replay.txt", "\n".join(lines) + ("\n" if lines else ""))
    sys.stdout.write((out / "replay.txt").read_text())
    return EXIT_OK


def cmd_compare(args) -> int:
    fw, entry = target_of(args)
    model_a, model_b = load_model(args.model_a, fw), load_model(args.model_b, fw)
    inputs = read_inputs(args.inputs)
    if not inputs:
        raise UsageError(f"{args.inputs}: no input files")
    ratio, a, b = coverage_compare(
        fw, model_a, model_b, inputs, strategy=strategy_of(args), budgets=budgets_of(args, entry),
        mode_a="stub" if args.model_a == "stub" else "fixed",
        mode_b="stub" if args.model_b == "stub" else "fixed")
    text = f"blocks_a {a}\nblocks_b {b}\nratio {ratio:.3f}\n"
    if args.out:
        _write(args.out, text)
    sys.stdout.write(text)
    if args.min_ratio is not None and ratio < args.min_ratio:
        return EXIT_DEVIATION
    return EXIT_OK


def cmd_model_show(args) -> int:
    try:
        text = Path(args.model).read_text()
    except OSError as e:
        raise UsageError(f"{args.model}: {e.strerror}") from None
    sys.stdout.write(dumps(loads(text)))
    return EXIT_OK


def cmd_model_diff(args) -> int:
    a, b = (load(p) for p in (args.a, args.b))
    changes = diff(a, b)
    for c in changes:
        print(c)
    return EXIT_DEVIATION if changes else EXIT_OK


def cmd_corpus_build(args) -> int:
    man = _manifest(args)
    if args.update_hashes:
        _update_hashes(man)
        man = _manifest(args)
    if args.out:
        for name, p in build(man, args.out).items():
            print(f"{name:16s} {p}")
    bad = hash_mismatches(man)
    for name, old, new in bad:
        print(f"hash mismatch {name}: manifest {old[:16]} image {new[:16]}", file=sys.stderr)
    return EXIT_DEVIATION if bad else EXIT_OK


def _update_hashes(man: CorpusManifest) -> None:
    fresh = {e.name: image_hash(e.image()) for e in man}
    lines, section = [], None
    for line in man.path.read_text().splitlines():
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1]
        elif section in fresh and s.startswith("sha256") and "=" in s:
            line = f"sha256 = {fresh[section]}"
        lines.append(line)
    man.path.write_text("\n".join(lines) + "\n")


def cmd_corpus_check(args) -> int:
    man = _manifest(args)
    names = set(args.only) if args.only else None
    unknown = (names or set()) - set(man.names())
    if unknown:
        raise UsageError(f"unknown firmware: {', '.join(sorted(unknown))}")
    bad = [b for b in hash_mismatches(man) if names is None or b[0] in names]
    for name, old, new in bad:
        print(f"hash mismatch {name}: manifest {old[:16]} image {new[:16]}")
    checks = check_corpus(man, args.seed, names, mutants=args.mutants,
                          strategy=strategy_of(args))
    sys.stdout.write(render(checks))
    failed = bool(bad) or any(not c.ok for c in checks)
    if args.bugs:
        for c in checks:
            e = c.entry
            if e.bug is None:
                continue
            corpus, stats = bug_hunt(e, c.session, args.seed, args.bug_execs)
            site = e.bug_site()
            hit = (e.bug.kind.value, site) in corpus.crashes
            print(f"bug {e.name}: {'found' if hit else 'NOT found'} at 0x{site:08x} "
                  f"after {stats.first_crash_exec or stats.execs} execs")
            failed |= not hit
    return EXIT_DEVIATION if failed else EXIT_OK


REPORT_COLUMNS = ("firmware", "peripherals", "registers", "read", "accuracy", "sr_groups",
                  "interrupts", "rounds", "runs", "inst_seconds", "fuzz_execs",
                  "runs_per_second", "edges", "blocks", "coverage_ratio")


def report_row(d: Path, manifest: CorpusManifest | None) -> dict[str, str]:
    if not (d / "model.txt").is_file() or not (d / "session.txt").is_file():
        raise MissingArtifacts(f"{d}: no instantiation artifacts (model.txt, session.txt)")
    model = load(d / "model.txt")
    info = _kv(d / "session.txt")
    timing = _kv(d / "timing.txt") if (d / "timing.txt").is_file() else {}
    read = [r for r in model.registers.values() if r.reads > 0]
    row = dict.fromkeys(REPORT_COLUMNS, "-")
    row.update(firmware=info.get("name", "-") if info.get("name", "-") != "-" else d.name,
               peripherals=str(len(model.peripherals())), registers=str(len(model.registers)),
               read=str(len(read)), sr_groups=str(len(model.sr_handlers)),
               interrupts=str(sum(1 for k, _ in model.interrupt_log if k == "enable")),
               rounds=info.get("rounds_to_stable", "-"), runs=info.get("runs", "-"),
               inst_seconds=timing.get("instantiate_seconds", "-"))
    name = info.get("name", "-")
    if manifest is not None and name in manifest.entries:
        e = manifest[name]
        n, dev, _ = categorization(e, model)
        bad = sum(1 for x in dev if x.kind in ("type1", "type2"))
        row["accuracy"] = f"{100 * (1 - bad / n) if n else 100:.1f}"
    fz = d / "fuzz"
    if (fz / "stats.txt").is_file():
        st = _kv(fz / "stats.txt")
        row.update(fuzz_execs=st.get("execs", "-"), edges=st.get("edges", "-"),
                   blocks=st.get("blocks", "-"))
        if (fz / "timing.txt").is_file():
            row["runs_per_second"] = _kv(fz / "timing.txt").get("execs_per_second", "-")
    if (d / "compare.txt").is_file():
        row["coverage_ratio"] = _kv(d / "compare.txt").get("ratio", "-")
    return row


def rounds_progression(d: Path) -> list[str]:
    out = []
    for line in (d / "rounds.log").read_text().splitlines() if (d / "rounds.log").is_file() else []:
        if line.startswith("round "):
            out.append(f"  {line}")
    return out


def cmd_report(args) -> int:
    dirs = [Path(p) for p in args.sessions]
    for d in dirs:
        if not d.is_dir():
            raise MissingArtifacts(f"{d}: not a session directory")
    try:
        manifest = _manifest(args)
    except ManifestError:
        manifest = None
    rows = [report_row(d, manifest) for d in dirs]
    if args.csv:
        buf = io.StringIO()
        w = csv.DictWriter(buf, REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
    else:
        widths = {c: max(len(c), *(len(r[c]) for r in rows)) for c in REPORT_COLUMNS}
        lines = [" ".join(c.rjust(widths[c]) for c in REPORT_COLUMNS)]
        lines += [" ".join(r[c].rjust(widths[c]) for c in REPORT_COLUMNS) for r in rows]
        for d, r in zip(dirs, rows):
            lines.append(f"{r['firmware']} rounds:")
            lines += rounds_progression(d)
        text = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_isa_doc(args) -> int:
    text = reference()
    if args.output:
        _write(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser ------------------------------------------------------------

def _target_args(p) -> None:
    p.add_argument("--image", help="flat image, or assembly source (*.s)")
    p.add_argument("--corpus", metavar="NAME", help="use a bundled corpus firmware instead")
    p.add_argument("--manifest", help="corpus manifest (default: the bundled one)")


def build_parser() -> argparse.ArgumentParser:
    runtime = argparse.ArgumentParser(add_help=False)
    g = runtime.add_argument_group("execution")
    g.add_argument("--irq-interval", type=int, default=DEFAULT_INTERVAL, metavar="N",
                   help="round-robin firing interval in basic blocks (default %(default)s)")
    g.add_argument("--irq-script", metavar="FILE", help="fire from 'bb_count irq' lines instead")
    g.add_argument("--no-irq", action="store_true", help="never fire interrupts")
    g.add_argument("--hang-blocks", type=int, metavar="N",
                   help=f"blocks without progress that count as a hang (default {HANG_BLOCKS})")
    g.add_argument("--max-insns", type=int, default=MAX_INSNS, metavar="N",
                   help="instruction budget per run (default %(default)s)")

    ap = argparse.ArgumentParser(prog="periface",
                                 description="Peripheral-model instantiation and fuzzing "
                                             "for a small MCU instruction set.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("asm", help="assemble source to a flat image")
    p.add_argument("source")
    p.add_argument("-o", "--output", help="image path (default: source with .bin)")
    p.add_argument("--symbols", metavar="FILE", help="also write a label map")
    p.set_defaults(func=cmd_asm)

    p = sub.add_parser("disasm", help="disassemble a flat image")
    p.add_argument("image")
    p.set_defaults(func=cmd_disasm)

    p = sub.add_parser("run", parents=[runtime], help="run one input and print the report")
    _target_args(p)
    p.add_argument("--model", help="model file (default: stub, all reads 0)")
    p.add_argument("--input", help="input bytes delivered through data-register reads")
    p.add_argument("--expect", choices=("ok", "crash", "hang", "input_exhausted", "model_miss"),
                   help="exit 1 unless the verdict matches")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("instantiate", parents=[runtime], help="instantiate a peripheral model")
    _target_args(p)
    p.add_argument("--out", required=True, help="session directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", metavar="DIR", help="seed inputs run before generated inputs")
    p.add_argument("--jobs", type=int, default=1, help="processes per exploration")
    p.add_argument("--max-runs", type=int, default=200)
    p.set_defaults(func=cmd_instantiate)

    p = sub.add_parser("fuzz", parents=[runtime], help="fuzz with the built-in mutator")
    _target_args(p)
    p.add_argument("--model", help="model file to start from (default: empty)")
    p.add_argument("--seeds", metavar="DIR", help="seed inputs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--execs", type=int, default=10_000)
    p.add_argument("--jobs", type=int, default=1, help="independent fuzzing instances")
    p.add_argument("--fixed", action="store_true",
                   help="never extend the model; unmodeled accesses end the run (model_miss)")
    p.add_argument("--input-dir", metavar="DIR",
                   help="replay these inputs instead of mutating (external fuzzer mode)")
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("compare", parents=[runtime], help="block coverage of two models")
    _target_args(p)
    p.add_argument("--model-a", required=True, help="model file or 'stub'")
    p.add_argument("--model-b", required=True, help="model file or 'stub'")
    p.add_argument("--inputs", required=True, metavar="DIR")
    p.add_argument("--out", help="also write the result here")
    p.add_argument("--min-ratio", type=float, help="exit 1 when the ratio is lower")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("model", help="inspect model files")
    msub = p.add_subparsers(dest="model_command", required=True)
    q = msub.add_parser("show", help="print a model in canonical form")
    q.add_argument("model")
    q.set_defaults(func=cmd_model_show)
    q = msub.add_parser("diff", help="changes from model A to model B (exit 1 if any)")
    q.add_argument("a")
    q.add_argument("b")
    q.set_defaults(func=cmd_model_diff)

    p = sub.add_parser("corpus", help="bundled firmware corpus")
    csub = p.add_subparsers(dest="corpus_command", required=True)
    q = csub.add_parser("build", help="assemble the corpus and verify image hashes")
    q.add_argument("--manifest")
    q.add_argument("--out", help="write <name>.bin and <name>.sym here")
    q.add_argument("--update-hashes", action="store_true",
                   help="rewrite the manifest hashes from the current sources")
    q.set_defaults(func=cmd_corpus_build)
    q = csub.add_parser("check", parents=[runtime], help="check the corpus against its manifest")
    q.add_argument("--manifest")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--only", nargs="+", metavar="NAME")
    q.add_argument("--mutants", type=int, default=100, help="mutated property inputs")
    q.add_argument("--bugs", action="store_true", help="also fuzz for the planted bugs")
    q.add_argument("--bug-execs", type=int, default=500_000)
    q.set_defaults(func=cmd_corpus_check)

    p = sub.add_parser("report", help="tables over session directories")
    p.add_argument("sessions", nargs="+", metavar="SESSION_DIR")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("isa", help="instruction set")
    isub = p.add_subparsers(dest="isa_command", required=True)
    q = isub.add_parser("doc", help="markdown instruction reference")
    q.add_argument("-o", "--output")
    q.set_defaults(func=cmd_isa_doc)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ManifestError, AsmError, ParseError, VersionMismatch,
            InvariantViolation, FirmwareMismatch, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
