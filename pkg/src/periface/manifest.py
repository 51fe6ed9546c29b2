"""The bundled firmware corpus and its manifest.

The manifest (``corpus/manifest.ini``) has one section per firmware::

    [usart_rx]
    source = firmware/usart_rx.s
    sha256 = <hash of the assembled image>
    class = conforming
    markers = BIRD
    sr_gated = yes
    seed_unit = byte
    seeds =
        4c2b2d353f
    labels =
        0x40004400 SR
        0x40004404 DR

``seed_unit = byte`` means every seed byte is delivered by one DR read;
``word`` (the default) means seeds are raw input bytes.  Optional keys:
``trigger`` (input that reaches on-demand initialization), ``bug`` (planted
bug as ``<label> <fault kind>``), ``expect`` (verdict under the property
runs, ``ok`` unless stated), ``hang_blocks`` (hang threshold override),
``miscategorized`` (``<addr> <category>`` lines: the category the model is
expected to give a labeled register).
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .asm import Assembly, assemble_program
from .fuzz import byte_stream
from .machine import MMIO_BASE, MMIO_END, FaultKind
from .regmodel import Category

CORPUS_DIR = Path(__file__).parent / "corpus"
MANIFEST_PATH = CORPUS_DIR / "manifest.ini"

CLASSES = ("conforming", "type1_nonconforming", "type2_nonconforming", "irq_multiplexed")
VERDICTS = ("ok", "hang", "crash")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PlantedBug:
    label: str
    kind: FaultKind


@dataclass
class FirmwareEntry:
    name: str
    source: Path
    sha256: str
    klass: str
    markers: bytes
    labels: dict[int, Category]
    seeds: list[bytes] = field(default_factory=list)
    sr_gated: bool = False
    trigger: bytes | None = None
    bug: PlantedBug | None = None
    expect: str = "ok"
    hang_blocks: int | None = None
    miscategorized: dict[int, Category] = field(default_factory=dict)
    _assembly: Assembly | None = field(default=None, repr=False, compare=False)

    @property
    def conforming(self) -> bool:
        return self.klass == "conforming"

    def assembly(self) -> Assembly:
        if self._assembly is None:
            self._assembly = assemble_program(self.source.read_text(), self.source.name)
        return self._assembly

    def image(self) -> bytes:
        return self.assembly().image

    def bug_site(self) -> int | None:
        if self.bug is None:
            return None
        return self.assembly().symbols[self.bug.label]

    def expected_model(self) -> dict[int, Category]:
        """Category the model should assign to each labeled register."""
        out = dict(self.labels)
        out.update(self.miscategorized)
        return out


@dataclass
class CorpusManifest:
    entries: dict[str, FirmwareEntry]
    path: Path

    def __iter__(self):
        return iter(self.entries.values())

    def __getitem__(self, name: str) -> FirmwareEntry:
        return self.entries[name]

    def names(self) -> list[str]:
        return list(self.entries)


def _lines(value: str) -> list[str]:
    return [ln.strip() for ln in value.splitlines() if ln.strip()]


def _hex_bytes(text: str, where: str) -> bytes:
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise ManifestError(f"{where}: bad hex input {text!r}") from None


def _reg_lines(value: str, where: str) -> dict[int, Category]:
    out = {}
    for ln in _lines(value):
        parts = ln.split()
        if len(parts) != 2:
            raise ManifestError(f"{where}: expected '<addr> <category>', got {ln!r}")
        try:
            addr = int(parts[0], 0)
            cat = Category(parts[1])
        except ValueError:
            raise ManifestError(f"{where}: bad register line {ln!r}") from None
        if not MMIO_BASE <= addr < MMIO_END:
            raise ManifestError(f"{where}: 0x{addr:08x} is outside the peripheral region")
        if addr in out:
            raise ManifestError(f"{where}: duplicate register 0x{addr:08x}")
        out[addr] = cat
    return out


def _entry(name: str, sec, base: Path) -> FirmwareEntry:
    where = f"[{name}]"
    for key in ("source", "class", "markers", "labels"):
        if key not in sec:
            raise ManifestError(f"{where}: missing '{key}'")
    klass = sec["class"]
    if klass not in CLASSES:
        raise ManifestError(f"{where}: unknown class {klass!r}")
    markers = sec["markers"].strip().encode("ascii")
    if not markers:
        raise ManifestError(f"{where}: empty marker string")
    unit = sec.get("seed_unit", "word")
    if unit not in ("byte", "word"):
        raise ManifestError(f"{where}: seed_unit must be 'byte' or 'word'")

    def data(text: str) -> bytes:
        raw = _hex_bytes(text, where)
        return byte_stream(raw) if unit == "byte" else raw

    bug = None
    if "bug" in sec:
        parts = sec["bug"].split()
        try:
            bug = PlantedBug(parts[0], FaultKind(parts[1]))
        except (IndexError, ValueError):
            raise ManifestError(f"{where}: bug must be '<label> <fault kind>'") from None
    expect = sec.get("expect", "ok")
    if expect not in VERDICTS:
        raise ManifestError(f"{where}: unknown expected verdict {expect!r}")
    labels = _reg_lines(sec["labels"], where)
    mis = _reg_lines(sec.get("miscategorized", ""), where)
    for addr in mis:
        if addr not in labels:
            raise ManifestError(f"{where}: miscategorized 0x{addr:08x} has no label")
    return FirmwareEntry(
        name=name,
        source=base / sec["source"],
        sha256=sec.get("sha256", "").strip(),
        klass=klass,
        markers=markers,
        labels=labels,
        seeds=[data(s) for s in _lines(sec.get("seeds", ""))],
        sr_gated=sec.getboolean("sr_gated", fallback=False),
        trigger=data(sec["trigger"].strip()) if "trigger" in sec else None,
        bug=bug,
        expect=expect,
        hang_blocks=sec.getint("hang_blocks") if "hang_blocks" in sec else None,
        miscategorized=mis,
    )


def load_manifest(path=None) -> CorpusManifest:
    path = Path(path) if path is not None else MANIFEST_PATH
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as f:
            cp.read_file(f)
    except (OSError, configparser.Error) as e:
        raise ManifestError(f"{path}: {e}") from None
    entries = {name: _entry(name, cp[name], path.parent) for name in cp.sections()}
    if not entries:
        raise ManifestError(f"{path}: no firmware sections")
    return CorpusManifest(entries, path)


def image_hash(image: bytes) -> str:
    return hashlib.sha256(image).hexdigest()


def build(manifest: CorpusManifest, out_dir) -> dict[str, Path]:
    """Assemble every firmware to ``<out_dir>/<name>.bin`` plus a ``.sym`` map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for e in manifest:
        asm = e.assembly()
        p = out / f"{e.name}.bin"
        p.write_bytes(asm.image)
        (out / f"{e.name}.sym").write_text(asm.symbol_map())
        written[e.name] = p
    return written


def hash_mismatches(manifest: CorpusManifest) -> list[tuple[str, str, str]]:
    """(name, recorded, actual) for every entry whose image hash drifted."""
    bad = []
    for e in manifest:
        actual = image_hash(e.image())
        if actual != e.sha256:
            bad.append((e.name, e.sha256, actual))
    return bad
