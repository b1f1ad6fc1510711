"""
Synthetic desk-scale corpus

Builds small well-formed PE files from a list of sections and imports, and
draws labelled sample profiles so the whole pipeline can run without any
live malware. Benign profiles carry common "benign marker" sections and
imports from ubiquitous DLLs; malicious profiles carry distinctive
signature sections and imports (crypto, share enumeration, restart manager)
and few markers.
"""
import struct
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np

from evasionlab.common.seeds import rng_for
from evasionlab.detector import BENIGN, MALICIOUS, Dataset
from evasionlab.featurizer import FEATURE_DIM, Space, hash_bucket, import_token
from evasionlab.pe_core import (
    ImportDescriptor,
    ImportFunction,
    PE32_MAGIC,
    PE32_PLUS_MAGIC,
    SECURITY_DIRECTORY,
    IMPORT_DIRECTORY,
    align,
    build_import_blob,
    compute_checksum,
    group_imports,
)

logger = logging.getLogger("flask.app")

E_LFANEW = 0x80
SIZE_OF_HEADERS = 0x400
FILE_ALIGNMENT = 0x200
SECTION_ALIGNMENT = 0x1000

CODE = 0x60000020
DATA = 0x40000040
WRITABLE_DATA = 0xC0000040

COMMON_SECTIONS = (".text", ".rdata", ".data")
MARKER_SECTIONS = (".rsrc", ".reloc", ".pdata", ".tls", ".didat", ".CRT", ".gfids", ".00cfg")
SIGNATURE_SECTIONS = (".crypt", ".lock", ".enc", ".vmp0", ".pack", ".ranz")

COMMON_IMPORTS = (
    ("kernel32.dll", "ExitProcess"),
    ("kernel32.dll", "GetModuleHandleW"),
)
MARKER_IMPORTS = (
    ("kernel32.dll", "GetSystemTimeAsFileTime"),
    ("kernel32.dll", "QueryPerformanceCounter"),
    ("kernel32.dll", "InitializeSListHead"),
    ("kernel32.dll", "GetCurrentProcessId"),
    ("kernel32.dll", "GetCurrentThreadId"),
    ("kernel32.dll", "GetStartupInfoW"),
    ("kernel32.dll", "SetUnhandledExceptionFilter"),
    ("kernel32.dll", "GetTickCount"),
    ("user32.dll", "CreateWindowExW"),
    ("user32.dll", "DefWindowProcW"),
    ("user32.dll", "DispatchMessageW"),
    ("user32.dll", "GetMessageW"),
    ("user32.dll", "RegisterClassExW"),
    ("user32.dll", "ShowWindow"),
    ("user32.dll", "LoadIconW"),
    ("user32.dll", "LoadCursorW"),
    ("advapi32.dll", "RegOpenKeyExW"),
    ("advapi32.dll", "RegQueryValueExW"),
    ("advapi32.dll", "RegCloseKey"),
    ("shell32.dll", "ShellExecuteW"),
    ("shell32.dll", "SHGetFolderPathW"),
    ("ole32.dll", "CoInitializeEx"),
    ("ole32.dll", "CoCreateInstance"),
    ("ole32.dll", "CoUninitialize"),
)
SIGNATURE_IMPORTS = (
    ("advapi32.dll", "CryptAcquireContextW"),
    ("advapi32.dll", "CryptGenKey"),
    ("advapi32.dll", "CryptExportKey"),
    ("advapi32.dll", "CryptImportKey"),
    ("bcrypt.dll", "BCryptEncrypt"),
    ("mpr.dll", "WNetOpenEnumW"),
    ("netapi32.dll", "NetShareEnum"),
    ("rstrtmgr.dll", "RmStartSession"),
    ("wininet.dll", "InternetOpenW"),
    ("vssapi.dll", "CreateVssBackupComponentsInternal"),
)

MARKER_RATE = {BENIGN: 0.8, MALICIOUS: 0.1}
SIGNATURE_RATE = {BENIGN: 0.05, MALICIOUS: 0.3}


@dataclass(frozen=True)
class SectionSpec:
    """A section to lay out: name, raw content and characteristics"""

    name: str
    data: bytes
    characteristics: int = DATA


def build_pe(
    sections: Sequence[SectionSpec],
    imports: Sequence[ImportDescriptor] = (),
    pe32_plus: bool = False,
    overlay: bytes = b"",
    dll: bool = False,
    entry_point: Optional[int] = None,
    signed: bool = False,
    import_section: str = ".idata",
) -> bytes:
    """Lays out a minimal well-formed PE file

    Sections are placed in order from file offset 0x400 and RVA 0x1000; when
    imports are given the import table goes into a final section named
    import_section. The entry point defaults to the start of the first section.
    signed points the security directory at the overlay.
    """
    optional_size = 240 if pe32_plus else 224
    table = E_LFANEW + 24 + optional_size
    wide = bool(pe32_plus)

    placed: List[Tuple[SectionSpec, int, int]] = []
    raw_offset, address = SIZE_OF_HEADERS, SECTION_ALIGNMENT
    for spec in sections:
        placed.append((spec, raw_offset, address))
        raw_offset += align(len(spec.data), FILE_ALIGNMENT)
        address += align(max(len(spec.data), 1), SECTION_ALIGNMENT)
    import_rva, import_size = 0, 0
    if imports:
        blob = build_import_blob(address, b"", imports, wide)
        import_rva, import_size = address, (len(imports) + 1) * 20
        placed.append((SectionSpec(import_section, blob, WRITABLE_DATA), raw_offset, address))
        raw_offset += align(len(blob), FILE_ALIGNMENT)
        address += align(len(blob), SECTION_ALIGNMENT)
    if table + 40 * len(placed) > SIZE_OF_HEADERS:
        raise ValueError("too many sections for the header area")

    out = bytearray(SIZE_OF_HEADERS)
    out[0:2] = b"MZ"
    struct.pack_into("<I", out, 0x3C, E_LFANEW)
    out[E_LFANEW:E_LFANEW + 4] = b"PE\0\0"
    characteristics = 0x0022 if wide else 0x0102
    if dll:
        characteristics |= 0x2000
    struct.pack_into("<HHIIIHH", out, E_LFANEW + 4, 0x8664 if wide else 0x14C, len(placed), 0, 0, 0,
                     optional_size, characteristics)

    optional = E_LFANEW + 24
    if entry_point is None:
        entry_point = placed[0][2] if placed else 0
    struct.pack_into("<HBB", out, optional, PE32_PLUS_MAGIC if wide else PE32_MAGIC, 14, 0)
    struct.pack_into("<I", out, optional + 16, entry_point)
    if wide:
        struct.pack_into("<Q", out, optional + 24, 0x140000000)
    else:
        struct.pack_into("<I", out, optional + 28, 0x400000)
    struct.pack_into("<II", out, optional + 32, SECTION_ALIGNMENT, FILE_ALIGNMENT)
    struct.pack_into("<HHHHHH", out, optional + 40, 6, 0, 0, 0, 6, 0)
    struct.pack_into("<II", out, optional + 56, address, SIZE_OF_HEADERS)
    struct.pack_into("<HH", out, optional + 68, 3, 0x8140)
    count_field = 108 if wide else 92
    struct.pack_into("<I", out, optional + count_field, 16)
    directories = optional + count_field + 4
    struct.pack_into("<II", out, directories + 8 * IMPORT_DIRECTORY, import_rva, import_size)

    for index, (spec, offset, rva) in enumerate(placed):
        struct.pack_into("<8sIIII", out, table + 40 * index, spec.name.encode("ascii"), len(spec.data), rva,
                         align(len(spec.data), FILE_ALIGNMENT), offset)
        struct.pack_into("<I", out, table + 40 * index + 36, spec.characteristics)
    for spec, offset, _ in placed:
        out.extend(bytes(offset - len(out)))
        out.extend(spec.data.ljust(align(len(spec.data), FILE_ALIGNMENT), b"\0"))
    if signed and overlay:
        struct.pack_into("<II", out, directories + 8 * SECURITY_DIRECTORY, len(out), len(overlay))
    out.extend(overlay)
    struct.pack_into("<I", out, optional + 64, compute_checksum(out))
    return bytes(out)


######################################################################
#  P R O F I L E S
######################################################################
@dataclass(frozen=True)
class Profile:
    """Section names and import pairs of one synthetic sample"""

    label: int
    sections: Tuple[str, ...]
    imports: Tuple[Tuple[str, str], ...]

    def feature_bits(self) -> np.ndarray:
        """The presence bits the featurizer would extract"""
        bits = np.zeros(FEATURE_DIM, dtype=np.int8)
        for name in self.sections:
            bits[hash_bucket(name, Space.SECTION)] = 1
        for dll, function in self.imports:
            bits[hash_bucket(import_token(dll, ImportFunction(function)), Space.IMPORT)] = 1
        return bits


def draw_profile(rng: np.random.Generator, label: int, import_section: str = ".idata") -> Profile:
    """Draws the features of one benign or malicious sample"""
    sections = list(COMMON_SECTIONS)
    sections += [name for name in MARKER_SECTIONS if rng.random() < MARKER_RATE[label]]
    sections += [name for name in SIGNATURE_SECTIONS if rng.random() < SIGNATURE_RATE[label]]
    imports = list(COMMON_IMPORTS)
    imports += [pair for pair in MARKER_IMPORTS if rng.random() < MARKER_RATE[label]]
    signatures = [pair for pair in SIGNATURE_IMPORTS if rng.random() < SIGNATURE_RATE[label]]
    if label == MALICIOUS and not signatures and not any(s in SIGNATURE_SECTIONS for s in sections):
        signatures.append(SIGNATURE_IMPORTS[int(rng.integers(len(SIGNATURE_IMPORTS)))])
    imports += signatures
    return Profile(label, tuple(sections + [import_section]), tuple(imports))


def synthetic_dataset(benign: int = 500, malicious: int = 500, seed: int = 0) -> Dataset:
    """A labelled feature dataset drawn straight from the profiles"""
    rng = rng_for(seed, "synthetic", "dataset")
    rows, labels, ids = [], [], []
    for label, count, prefix in ((BENIGN, benign, "b"), (MALICIOUS, malicious, "m")):
        for index in range(count):
            rows.append(draw_profile(rng, label).feature_bits() - 0.5)
            labels.append(label)
            ids.append(f"{prefix}{index:05d}")
    return Dataset(np.array(rows, dtype=np.float64).reshape(len(rows), FEATURE_DIM), np.array(labels), tuple(ids),
                   seed)


def profile_to_pe(profile: Profile, rng: np.random.Generator) -> bytes:
    """Renders a profile as PE bytes with random section content"""
    specs = []
    for name in profile.sections[:-1]:
        size = int(rng.integers(0x100, 0x900))
        data = rng.integers(0, 256, size=size, dtype=np.uint8).tobytes()
        if name == ".text":
            specs.append(SectionSpec(name, b"\xc3" + data[1:], CODE))
        else:
            specs.append(SectionSpec(name, data, DATA))
    return build_pe(specs, group_imports(profile.imports), import_section=profile.sections[-1])


def build_desk_corpus(out_dir, benign: int = 60, malicious: int = 60, seed: int = 0) -> Dict[str, List[Path]]:
    """Writes benign/ and malicious/ directories of synthetic PE files"""
    root = Path(out_dir)
    written: Dict[str, List[Path]] = {"benign": [], "malicious": []}
    for label, count, name in ((BENIGN, benign, "benign"), (MALICIOUS, malicious, "malicious")):
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        for index in range(count):
            rng = rng_for(seed, "synthetic", name, index)
            path = folder / f"{name}-{index:04d}.exe"
            path.write_bytes(profile_to_pe(draw_profile(rng, label), rng))
            written[name].append(path)
    logger.info("Desk corpus written to %s: %d benign, %d malicious", root, benign, malicious)
    return written
