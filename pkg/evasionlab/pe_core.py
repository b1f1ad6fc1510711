"""
PE Core

Parsing, validation and re-serialization of Windows PE files.

The rewriter is deliberately minimal: it can rename a section, append a
section, rebuild the import table into a new appended section and append
overlay bytes. Everything else (resources, relocations, TLS, certificates)
is carried as opaque bytes and never modified.

Models
------
PeImage - an immutable parsed PE file
SectionRecord - one section table entry
ImportDescriptor - one imported DLL and its functions
ValidationReport - structural problems found by validate_pe

"""
import json
import struct
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple
import numpy as np

logger = logging.getLogger("flask.app")

DOS_HEADER_SIZE = 64
PE_SIGNATURE = b"PE\0\0"
COFF_HEADER_SIZE = 20
SECTION_HEADER_SIZE = 40
IMPORT_DESCRIPTOR_SIZE = 20
NUM_DATA_DIRECTORIES = 16
PE32_MAGIC = 0x10B
PE32_PLUS_MAGIC = 0x20B

IMPORT_DIRECTORY = 1
SECURITY_DIRECTORY = 4

# offsets inside the optional header
ENTRY_POINT_FIELD = 16
ALIGNMENT_FIELDS = 32
SIZE_OF_IMAGE_FIELD = 56
CHECKSUM_FIELD = 64

IMAGE_FILE_DLL = 0x2000
SCN_CNT_INITIALIZED_DATA = 0x00000040
SCN_MEM_READ = 0x40000000
SCN_MEM_WRITE = 0x80000000

MAX_IMPORT_DESCRIPTORS = 4096
MAX_THUNKS = 65536
MAX_NAME_LENGTH = 512

ERROR = "error"
WARNING = "warning"


######################################################################
#  E R R O R S
######################################################################
class PeFormatError(Exception):
    """Base class for files that cannot be parsed as PE"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset 0x{offset:x})")
        self.offset = offset


class TruncatedHeader(PeFormatError):
    """A header runs past the end of the file"""


class MissingDosMagic(PeFormatError):
    """The file does not start with MZ"""


class MissingPeSignature(PeFormatError):
    """e_lfanew does not point at PE\\0\\0"""


class UnsupportedOptionalHeader(PeFormatError):
    """Optional header magic is neither PE32 nor PE32+"""


class MalformedSectionTable(PeFormatError):
    """The section table breaks a layout invariant"""


class MalformedImportTable(PeFormatError):
    """The import directory cannot be decoded"""


class LayoutConflict(Exception):
    """Sections cannot be serialized without overlap"""


######################################################################
#  M O D E L S
######################################################################
@dataclass(frozen=True)
class DosHeader:
    """The 64 byte MZ header"""

    raw: bytes
    e_lfanew: int


@dataclass(frozen=True)
class CoffHeader:
    """The COFF file header"""

    machine: int
    num_sections: int
    characteristics: int
    size_of_optional_header: int


@dataclass(frozen=True)
class DataDirectory:
    """One optional header data directory entry"""

    rva: int
    size: int


@dataclass(frozen=True)
class OptionalHeader:
    """The fields of the optional header the rewriter cares about"""

    magic: int
    entry_point_rva: int
    image_base: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int
    checksum: int = field(compare=False)
    number_of_rva_and_sizes: int
    data_directories: Tuple[DataDirectory, ...]

    @property
    def is_pe32_plus(self) -> bool:
        """True for 64 bit images"""
        return self.magic == PE32_PLUS_MAGIC

    @property
    def data_directory_field(self) -> int:
        """Offset of the data directory array inside the optional header"""
        return 112 if self.is_pe32_plus else 96


@dataclass(frozen=True)
class SectionRecord:
    """
    One section table entry

    content is only set on sections appended in memory; it holds the raw
    data until write_pe places it in the file.
    """

    name: str
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_offset: int
    characteristics: int
    content: Optional[bytes] = field(default=None, compare=False, repr=False)

    @property
    def raw_end(self) -> int:
        """File offset one past the raw data"""
        return self.raw_offset + self.raw_size

    @property
    def extent(self) -> int:
        """Size of the section once mapped (virtual size, or raw size when zero)"""
        return self.virtual_size or self.raw_size

    def contains_rva(self, rva: int) -> bool:
        """True when rva falls inside the mapped section"""
        return self.virtual_address <= rva < self.virtual_address + max(self.virtual_size, self.raw_size)


@dataclass(frozen=True)
class ImportFunction:
    """An imported function, by name or by ordinal"""

    name: Optional[str] = None
    ordinal: Optional[int] = None

    @property
    def label(self) -> str:
        """The name, or #N for ordinals"""
        return self.name if self.name is not None else f"#{self.ordinal}"


@dataclass(frozen=True)
class ImportDescriptor:
    """One imported DLL"""

    dll_name: str
    functions: Tuple[ImportFunction, ...]


@dataclass(frozen=True)
class PeImage:
    """
    A parsed PE file

    Equality is structural: the checksum and the raw file bytes are ignored.
    """

    dos_header: DosHeader
    coff_header: CoffHeader
    optional_header: OptionalHeader
    sections: Tuple[SectionRecord, ...]
    imports: Tuple[ImportDescriptor, ...]
    overlay: bytes
    overlay_offset: int
    raw_bytes: bytes = field(compare=False, repr=False)

    @property
    def coff_offset(self) -> int:
        """File offset of the COFF header"""
        return self.dos_header.e_lfanew + len(PE_SIGNATURE)

    @property
    def optional_offset(self) -> int:
        """File offset of the optional header"""
        return self.coff_offset + COFF_HEADER_SIZE

    @property
    def section_table_offset(self) -> int:
        """File offset of the first section table entry"""
        return self.optional_offset + self.coff_header.size_of_optional_header

    @property
    def checksum_offset(self) -> int:
        """File offset of the checksum field"""
        return self.optional_offset + CHECKSUM_FIELD

    def section_data(self, index: int) -> bytes:
        """Raw data of a section, pending or already in the file"""
        section = self.sections[index]
        if section.content is not None:
            return section.content
        return self.raw_bytes[section.raw_offset:section.raw_end]


@dataclass(frozen=True)
class Violation:
    """One structural problem"""

    code: str
    message: str
    offset: int
    severity: str = ERROR

    def serialize(self) -> dict:
        """Serializes a Violation into a dictionary"""
        return {"code": self.code, "message": self.message, "offset": self.offset, "severity": self.severity}


@dataclass(frozen=True)
class ValidationReport:
    """Result of validate_pe"""

    violations: Tuple[Violation, ...] = ()

    @property
    def is_loadable_shape(self) -> bool:
        """True when no error severity violation was found"""
        return not any(v.severity == ERROR for v in self.violations)

    @property
    def codes(self) -> List[str]:
        """The violation codes in report order"""
        return [v.code for v in self.violations]

    def serialize(self) -> dict:
        """Serializes the report into a dictionary"""
        return {
            "is_loadable_shape": self.is_loadable_shape,
            "violations": [v.serialize() for v in self.violations],
        }

    def to_json(self) -> str:
        """The stable JSON form"""
        return json.dumps(self.serialize(), sort_keys=True)


######################################################################
#  P A R S I N G
######################################################################
def parse_pe(data: bytes) -> PeImage:
    """Parses PE file bytes into a PeImage

    :param data: the raw file
    :type data: bytes

    :return: a PeImage whose layout invariants hold
    :rtype: PeImage

    """
    data = bytes(data)
    if len(data) < DOS_HEADER_SIZE:
        raise TruncatedHeader("file is shorter than the DOS header", len(data))
    if data[:2] != b"MZ":
        raise MissingDosMagic("missing MZ magic", 0)

    (e_lfanew,) = struct.unpack_from("<I", data, 0x3C)
    if e_lfanew + len(PE_SIGNATURE) + COFF_HEADER_SIZE > len(data):
        raise TruncatedHeader("NT headers run past the end of the file", e_lfanew)
    if data[e_lfanew:e_lfanew + 4] != PE_SIGNATURE:
        raise MissingPeSignature("missing PE signature", e_lfanew)

    coff_offset = e_lfanew + len(PE_SIGNATURE)
    machine, num_sections, _, _, _, size_opt, characteristics = struct.unpack_from("<HHIIIHH", data, coff_offset)
    coff = CoffHeader(machine, num_sections, characteristics, size_opt)
    optional = _parse_optional_header(data, coff_offset + COFF_HEADER_SIZE, size_opt)
    table_offset = coff_offset + COFF_HEADER_SIZE + size_opt
    sections = _parse_sections(data, table_offset, num_sections)

    for violation in _layout_violations(optional, sections, coff_offset + COFF_HEADER_SIZE, table_offset, len(data)):
        if violation.severity == ERROR:
            raise MalformedSectionTable(violation.message, violation.offset)

    raw_ends = [s.raw_end for s in sections if s.raw_size]
    overlay_offset = min(max(raw_ends) if raw_ends else optional.size_of_headers, len(data))
    image = PeImage(
        dos_header=DosHeader(data[:DOS_HEADER_SIZE], e_lfanew),
        coff_header=coff,
        optional_header=optional,
        sections=sections,
        imports=(),
        overlay=data[overlay_offset:],
        overlay_offset=overlay_offset,
        raw_bytes=data,
    )
    return replace(image, imports=_parse_imports(image))


def _parse_optional_header(data: bytes, offset: int, size: int) -> OptionalHeader:
    if size < 2 or offset + size > len(data):
        raise TruncatedHeader("optional header runs past the end of the file", offset)
    (magic,) = struct.unpack_from("<H", data, offset)
    if magic == PE32_MAGIC:
        (image_base,) = struct.unpack_from("<I", data, offset + 28)
        count_field, directory_field = 92, 96
    elif magic == PE32_PLUS_MAGIC:
        (image_base,) = struct.unpack_from("<Q", data, offset + 24)
        count_field, directory_field = 108, 112
    else:
        raise UnsupportedOptionalHeader(f"unknown optional header magic 0x{magic:x}", offset)
    if size < directory_field:
        raise TruncatedHeader("optional header is too small", offset)

    (entry_point,) = struct.unpack_from("<I", data, offset + ENTRY_POINT_FIELD)
    section_alignment, file_alignment = struct.unpack_from("<II", data, offset + ALIGNMENT_FIELDS)
    size_of_image, size_of_headers, checksum = struct.unpack_from("<III", data, offset + SIZE_OF_IMAGE_FIELD)
    (declared,) = struct.unpack_from("<I", data, offset + count_field)
    if not (_is_power_of_two(section_alignment) and _is_power_of_two(file_alignment)):
        raise MalformedSectionTable("alignments must be powers of two", offset + ALIGNMENT_FIELDS)

    count = min(declared, NUM_DATA_DIRECTORIES, (size - directory_field) // 8)
    directories = [
        DataDirectory(*struct.unpack_from("<II", data, offset + directory_field + 8 * index))
        for index in range(count)
    ]
    directories += [DataDirectory(0, 0)] * (NUM_DATA_DIRECTORIES - count)
    return OptionalHeader(
        magic=magic,
        entry_point_rva=entry_point,
        image_base=image_base,
        section_alignment=section_alignment,
        file_alignment=file_alignment,
        size_of_image=size_of_image,
        size_of_headers=size_of_headers,
        checksum=checksum,
        number_of_rva_and_sizes=count,
        data_directories=tuple(directories),
    )


def _parse_sections(data: bytes, offset: int, count: int) -> Tuple[SectionRecord, ...]:
    if offset + count * SECTION_HEADER_SIZE > len(data):
        raise MalformedSectionTable("section table runs past the end of the file", offset)
    sections = []
    for index in range(count):
        entry = offset + index * SECTION_HEADER_SIZE
        raw_name, virtual_size, virtual_address, raw_size, raw_offset = struct.unpack_from("<8sIIII", data, entry)
        (characteristics,) = struct.unpack_from("<I", data, entry + 36)
        name = raw_name.rstrip(b"\0")
        if b"\0" in name:
            raise MalformedSectionTable("section name has an interior NUL", entry)
        sections.append(
            SectionRecord(
                name=name.decode("latin-1"),
                virtual_size=virtual_size,
                virtual_address=virtual_address,
                raw_size=raw_size,
                raw_offset=raw_offset,
                characteristics=characteristics,
            )
        )
    return tuple(sections)


def _parse_imports(image: PeImage) -> Tuple[ImportDescriptor, ...]:
    directory = image.optional_header.data_directories[IMPORT_DIRECTORY]
    if directory.rva == 0:
        return ()
    data = image.raw_bytes
    offset = rva_to_offset(image, directory.rva)
    if offset is None:
        raise MalformedImportTable("import directory RVA is not mapped", directory.rva)

    descriptors = []
    for index in range(MAX_IMPORT_DESCRIPTORS):
        entry = offset + index * IMPORT_DESCRIPTOR_SIZE
        if entry + IMPORT_DESCRIPTOR_SIZE > len(data):
            raise MalformedImportTable("import descriptor runs past the end of the file", entry)
        original_thunk, _, _, name_rva, first_thunk = struct.unpack_from("<IIIII", data, entry)
        if name_rva == 0 and first_thunk == 0:
            return tuple(descriptors)
        dll_name = _read_cstring(image, name_rva, entry)
        functions = _read_thunks(image, original_thunk or first_thunk, entry)
        if not dll_name or not functions:
            raise MalformedImportTable("empty import descriptor", entry)
        descriptors.append(ImportDescriptor(dll_name, functions))
    raise MalformedImportTable("import descriptor array is not terminated", offset)


def _read_cstring(image: PeImage, rva: int, where: int) -> str:
    offset = rva_to_offset(image, rva)
    if offset is None:
        raise MalformedImportTable(f"import name RVA 0x{rva:x} is not mapped", where)
    end = image.raw_bytes.find(b"\0", offset, offset + MAX_NAME_LENGTH)
    if end < 0:
        raise MalformedImportTable("import name is not terminated", offset)
    return image.raw_bytes[offset:end].decode("latin-1")


def _read_thunks(image: PeImage, rva: int, where: int) -> Tuple[ImportFunction, ...]:
    wide = image.optional_header.is_pe32_plus
    width, fmt = (8, "<Q") if wide else (4, "<I")
    ordinal_flag = 1 << (width * 8 - 1)
    offset = rva_to_offset(image, rva)
    if offset is None:
        raise MalformedImportTable(f"thunk array RVA 0x{rva:x} is not mapped", where)

    functions = []
    for index in range(MAX_THUNKS):
        position = offset + index * width
        if position + width > len(image.raw_bytes):
            raise MalformedImportTable("thunk array runs past the end of the file", position)
        (value,) = struct.unpack_from(fmt, image.raw_bytes, position)
        if value == 0:
            return tuple(functions)
        if value & ordinal_flag:
            functions.append(ImportFunction(ordinal=value & 0xFFFF))
        else:
            functions.append(ImportFunction(name=_read_cstring(image, (value & 0x7FFFFFFF) + 2, position)))
    raise MalformedImportTable("thunk array is not terminated", offset)


def rva_to_offset(image: PeImage, rva: int) -> Optional[int]:
    """Maps an RVA to a file offset, or None when it has no raw backing"""
    if rva < image.optional_header.size_of_headers:
        return rva
    for section in image.sections:
        if section.contains_rva(rva):
            delta = rva - section.virtual_address
            return section.raw_offset + delta if delta < section.raw_size else None
    return None


def section_for_rva(image: PeImage, rva: int) -> Optional[int]:
    """Index of the section mapping rva"""
    for index, section in enumerate(image.sections):
        if section.contains_rva(rva):
            return index
    return None


######################################################################
#  V A L I D A T I O N
######################################################################
def validate_pe(image: PeImage) -> ValidationReport:
    """Checks the structural invariants a loader relies on

    Violations are data: this never raises.
    """
    optional = image.optional_header
    table = image.section_table_offset
    violations = list(_layout_violations(optional, image.sections, image.optional_offset, table, None))

    if image.coff_header.num_sections != len(image.sections):
        violations.append(
            Violation(
                "SECTION_COUNT_MISMATCH",
                f"header declares {image.coff_header.num_sections} sections, table has {len(image.sections)}",
                image.coff_offset + 2,
            )
        )
    for index, section in enumerate(image.sections):
        encoded = section.name.encode("latin-1", errors="replace")
        if len(encoded) > 8 or "\0" in section.name:
            violations.append(
                Violation("SECTION_NAME_INVALID", f"section name {section.name!r} is invalid", table + index * 40)
            )

    is_dll = bool(image.coff_header.characteristics & IMAGE_FILE_DLL)
    entry = optional.entry_point_rva
    if not (entry == 0 and is_dll) and section_for_rva(image, entry) is None:
        violations.append(
            Violation("ENTRYPOINT_UNMAPPED", f"entry point 0x{entry:x} is outside every section",
                      image.optional_offset + ENTRY_POINT_FIELD)
        )

    imports = optional.data_directories[IMPORT_DIRECTORY]
    if imports.rva and rva_to_offset(image, imports.rva) is None:
        violations.append(
            Violation("IMPORT_DIRECTORY_UNMAPPED", f"import directory 0x{imports.rva:x} has no raw backing",
                      image.optional_offset + optional.data_directory_field + 8 * IMPORT_DIRECTORY)
        )

    signature = optional.data_directories[SECURITY_DIRECTORY]
    if signature.size:
        violations.append(
            Violation("SIGNATURE_PRESENT", "signed input: any mutation invalidates the signature",
                      image.optional_offset + optional.data_directory_field + 8 * SECURITY_DIRECTORY, WARNING)
        )
    return ValidationReport(tuple(violations))


def _layout_violations(
    optional: OptionalHeader, sections: Sequence[SectionRecord], optional_offset: int, table: int,
    file_size: Optional[int],
) -> Iterable[Violation]:
    """Yields the section layout invariants that do not hold"""
    file_alignment = optional.file_alignment or 1
    section_alignment = optional.section_alignment or 1
    table_end = table + len(sections) * SECTION_HEADER_SIZE
    if table_end > optional.size_of_headers:
        yield Violation("SECTION_TABLE_OVERFLOW", "section table runs past the headers", table)

    previous = None
    for index, section in enumerate(sections):
        entry = table + index * SECTION_HEADER_SIZE
        if section.raw_size:
            if section.raw_offset % file_alignment:
                yield Violation("SECTION_RAW_UNALIGNED", f"section {index} raw offset is not file aligned", entry)
            if section.raw_offset < optional.size_of_headers:
                yield Violation("SECTION_RAW_OVERLAP", f"section {index} raw data overlaps the headers", entry)
            if file_size is not None and section.raw_end > file_size:
                yield Violation("SECTION_RAW_TRUNCATED", f"section {index} raw data runs past the end of the file", entry)
        if section.virtual_address % section_alignment:
            yield Violation("SECTION_VA_UNALIGNED", f"section {index} address is not section aligned", entry)
        if previous is not None:
            previous_end = previous.virtual_address + align(previous.extent, section_alignment)
            if section.virtual_address < previous_end:
                yield Violation("SECTION_VA_ORDER", f"section {index} address is not ascending", entry)
        previous = section

    ordered = sorted((s for s in sections if s.raw_size), key=lambda s: s.raw_offset)
    for left, right in zip(ordered, ordered[1:]):
        if right.raw_offset < left.raw_end:
            yield Violation("SECTION_RAW_OVERLAP", f"section {right.name!r} overlaps {left.name!r}",
                            table + sections.index(right) * SECTION_HEADER_SIZE)

    if sections:
        last = sections[-1]
        needed = last.virtual_address + align(last.extent, section_alignment)
        if optional.size_of_image < needed:
            yield Violation("IMAGE_SIZE_TOO_SMALL", f"size of image 0x{optional.size_of_image:x} < 0x{needed:x}",
                            optional_offset + SIZE_OF_IMAGE_FIELD)


######################################################################
#  C H E C K S U M
######################################################################
def compute_checksum(data: bytes) -> int:
    """The PE checksum: ones-complement 16 bit sum without the checksum field, plus the file length"""
    if len(data) < DOS_HEADER_SIZE:
        raise TruncatedHeader("file is shorter than the DOS header", len(data))
    (e_lfanew,) = struct.unpack_from("<I", data, 0x3C)
    field_offset = e_lfanew + len(PE_SIGNATURE) + COFF_HEADER_SIZE + CHECKSUM_FIELD
    if field_offset + 4 > len(data):
        raise TruncatedHeader("checksum field runs past the end of the file", field_offset)

    buffer = bytearray(data)
    buffer[field_offset:field_offset + 4] = b"\0\0\0\0"
    if len(buffer) % 2:
        buffer.append(0)
    total = int(np.frombuffer(bytes(buffer), dtype="<u2").sum(dtype=np.uint64))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return (total + len(data)) & 0xFFFFFFFF


######################################################################
#  W R I T I N G
######################################################################
def write_pe(image: PeImage) -> bytes:
    """Serializes a PeImage, recomputing the checksum

    Sections already in the file keep their raw bytes untouched; appended
    sections are placed at their assigned raw offsets and the overlay
    follows the last section.
    """
    _check_writable(image)
    optional = image.optional_header
    out = bytearray(image.raw_bytes[:image.overlay_offset])

    table = image.section_table_offset
    for index, section in enumerate(image.sections):
        entry = table + index * SECTION_HEADER_SIZE
        if section.content is not None:
            out[entry:entry + SECTION_HEADER_SIZE] = bytes(SECTION_HEADER_SIZE)
        struct.pack_into(
            "<8sIIII", out, entry,
            section.name.encode("latin-1"), section.virtual_size, section.virtual_address,
            section.raw_size, section.raw_offset,
        )
        struct.pack_into("<I", out, entry + 36, section.characteristics)

    for section in sorted((s for s in image.sections if s.content is not None), key=lambda s: s.raw_offset):
        if len(out) < section.raw_offset:
            out.extend(bytes(section.raw_offset - len(out)))
        payload = section.content[:section.raw_size].ljust(section.raw_size, b"\0")
        out[section.raw_offset:section.raw_end] = payload
    shift = len(out) - image.overlay_offset
    out.extend(image.overlay)

    struct.pack_into("<H", out, image.coff_offset + 2, len(image.sections))
    struct.pack_into("<I", out, image.optional_offset + ENTRY_POINT_FIELD, optional.entry_point_rva)
    struct.pack_into("<I", out, image.optional_offset + SIZE_OF_IMAGE_FIELD, optional.size_of_image)
    for index in range(optional.number_of_rva_and_sizes):
        directory = optional.data_directories[index]
        # the certificate table is addressed by file offset and moves with the overlay
        if index == SECURITY_DIRECTORY and directory.size and directory.rva >= image.overlay_offset:
            directory = replace(directory, rva=directory.rva + shift)
        struct.pack_into("<II", out, image.optional_offset + optional.data_directory_field + 8 * index,
                         directory.rva, directory.size)
    struct.pack_into("<I", out, image.checksum_offset, compute_checksum(out))
    return bytes(out)


def _check_writable(image: PeImage) -> None:
    optional = image.optional_header
    table_end = image.section_table_offset + len(image.sections) * SECTION_HEADER_SIZE
    raw = [s for s in image.sections if s.raw_size]
    first_raw = min((s.raw_offset for s in raw), default=optional.size_of_headers)
    if table_end > min(first_raw, optional.size_of_headers):
        raise LayoutConflict("no room left for the section table in the headers")

    ordered = sorted(raw, key=lambda s: s.raw_offset)
    for left, right in zip(ordered, ordered[1:]):
        if right.raw_offset < left.raw_end:
            raise LayoutConflict(f"section {right.name!r} overlaps {left.name!r}")
    for section in raw:
        if section.content is None and section.raw_end > image.overlay_offset:
            raise LayoutConflict(f"section {section.name!r} has no raw data in the file")
        if section.content is not None and section.raw_offset < image.overlay_offset:
            raise LayoutConflict(f"appended section {section.name!r} starts inside the original body")


######################################################################
#  R E W R I T E R   P R I M I T I V E S
######################################################################
def align(value: int, alignment: int) -> int:
    """Rounds value up to a multiple of alignment"""
    if alignment <= 1:
        return value
    return (value + alignment - 1) // alignment * alignment


def _is_power_of_two(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


def rename_section(image: PeImage, index: int, name: str) -> PeImage:
    """Returns a copy with section index renamed"""
    if not 0 < len(name.encode("ascii")) <= 8:
        raise ValueError(f"section name {name!r} must be 1 to 8 ASCII bytes")
    sections = list(image.sections)
    sections[index] = replace(sections[index], name=name)
    return replace(image, sections=tuple(sections))


def next_virtual_address(image: PeImage) -> int:
    """Section aligned RVA just past the last section"""
    alignment = image.optional_header.section_alignment
    if not image.sections:
        return align(image.optional_header.size_of_headers, alignment)
    return max(align(s.virtual_address + align(s.extent, alignment), alignment) for s in image.sections)


def next_raw_offset(image: PeImage) -> int:
    """File aligned offset just past the section data"""
    ends = [image.overlay_offset] + [s.raw_end for s in image.sections]
    return align(max(ends), image.optional_header.file_alignment)


def append_section(image: PeImage, name: str, content: bytes, characteristics: int) -> PeImage:
    """Returns a copy with one more section holding content"""
    if not content:
        raise ValueError("an appended section needs content")
    if not 0 < len(name.encode("ascii")) <= 8:
        raise ValueError(f"section name {name!r} must be 1 to 8 ASCII bytes")
    optional = image.optional_header
    table_end = image.section_table_offset + (len(image.sections) + 1) * SECTION_HEADER_SIZE
    first_raw = min((s.raw_offset for s in image.sections if s.raw_size), default=optional.size_of_headers)
    if table_end > min(first_raw, optional.size_of_headers):
        raise LayoutConflict("no free section table slot in the headers")

    section = SectionRecord(
        name=name,
        virtual_size=len(content),
        virtual_address=next_virtual_address(image),
        raw_size=align(len(content), optional.file_alignment),
        raw_offset=next_raw_offset(image),
        characteristics=characteristics,
        content=bytes(content),
    )
    size_of_image = max(
        optional.size_of_image,
        align(section.virtual_address + section.virtual_size, optional.section_alignment),
    )
    return replace(
        image,
        coff_header=replace(image.coff_header, num_sections=len(image.sections) + 1),
        optional_header=replace(optional, size_of_image=size_of_image),
        sections=image.sections + (section,),
    )


def append_overlay(image: PeImage, payload: bytes) -> PeImage:
    """Returns a copy with payload appended after the overlay"""
    return replace(image, overlay=image.overlay + bytes(payload))


def add_imports(image: PeImage, additions: Sequence[ImportDescriptor]) -> PeImage:
    """Rebuilds the import table into a new section with extra descriptors

    The existing descriptors are copied verbatim (their thunks and names stay
    where they are) and the import directory is repointed. The new section
    reuses the name of the section that held the old table so the set of
    section names does not change.
    """
    if not additions:
        raise ValueError("nothing to import")
    if not image.sections:
        raise LayoutConflict("image has no sections")
    optional = image.optional_header
    if optional.number_of_rva_and_sizes <= IMPORT_DIRECTORY:
        raise LayoutConflict("image has no import data directory slot")

    directory = optional.data_directories[IMPORT_DIRECTORY]
    existing = b""
    host = None
    if directory.rva:
        host = section_for_rva(image, directory.rva)
        existing = _read_rva(image, directory.rva, IMPORT_DESCRIPTOR_SIZE * len(image.imports))
    name = image.sections[host if host is not None else -1].name

    base = next_virtual_address(image)
    blob = build_import_blob(base, existing, additions, optional.is_pe32_plus)
    grown = append_section(image, name, blob, SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE)
    directories = list(grown.optional_header.data_directories)
    count = len(image.imports) + len(additions) + 1
    directories[IMPORT_DIRECTORY] = DataDirectory(base, count * IMPORT_DESCRIPTOR_SIZE)
    return replace(
        grown,
        optional_header=replace(grown.optional_header, data_directories=tuple(directories)),
        imports=image.imports + tuple(additions),
    )


def _read_rva(image: PeImage, rva: int, length: int) -> bytes:
    index = section_for_rva(image, rva)
    if index is not None and image.sections[index].content is not None:
        start = rva - image.sections[index].virtual_address
        return image.sections[index].content[start:start + length]
    offset = rva_to_offset(image, rva)
    if offset is None:
        raise LayoutConflict(f"RVA 0x{rva:x} has no raw backing")
    return image.raw_bytes[offset:offset + length]


def build_import_blob(base: int, existing: bytes, additions: Sequence[ImportDescriptor], wide: bool) -> bytes:
    """Import descriptors, thunk arrays and names laid out for a section at RVA base"""
    width, fmt = (8, "<Q") if wide else (4, "<I")
    ordinal_flag = 1 << (width * 8 - 1)
    descriptor_count = len(existing) // IMPORT_DESCRIPTOR_SIZE + len(additions) + 1

    # thunk arrays start on a pointer sized boundary
    cursor = align(descriptor_count * IMPORT_DESCRIPTOR_SIZE, width)
    thunk_offsets = []
    for descriptor in additions:
        lookup = cursor
        cursor += (len(descriptor.functions) + 1) * width
        thunk_offsets.append((lookup, cursor))
        cursor += (len(descriptor.functions) + 1) * width

    strings = bytearray()
    thunk_values = []
    dll_rvas = []
    for descriptor in additions:
        values = []
        for function in descriptor.functions:
            if function.name is None:
                values.append(ordinal_flag | function.ordinal)
                continue
            if (cursor + len(strings)) % 2:
                strings.append(0)
            values.append(base + cursor + len(strings))
            strings += struct.pack("<H", 0) + function.name.encode("ascii") + b"\0"
        thunk_values.append(values)
        dll_rvas.append(base + cursor + len(strings))
        strings += descriptor.dll_name.encode("ascii") + b"\0"

    blob = bytearray(cursor)
    blob[:len(existing)] = existing
    for index, (lookup, address) in enumerate(thunk_offsets):
        entry = len(existing) + index * IMPORT_DESCRIPTOR_SIZE
        struct.pack_into("<IIIII", blob, entry, base + lookup, 0, 0, dll_rvas[index], base + address)
        for position, value in enumerate(thunk_values[index]):
            struct.pack_into(fmt, blob, lookup + position * width, value)
            struct.pack_into(fmt, blob, address + position * width, value)
    return bytes(blob + strings)


def group_imports(pairs: Iterable[Tuple[str, str]]) -> Tuple[ImportDescriptor, ...]:
    """Groups (dll, function) pairs into descriptors in first-seen order; "#N" is an ordinal"""
    grouped = {}
    for dll, function in pairs:
        entry = ImportFunction(ordinal=int(function[1:])) if function.startswith("#") else ImportFunction(function)
        if entry not in grouped.setdefault(dll, []):
            grouped[dll].append(entry)
    return tuple(ImportDescriptor(dll, tuple(functions)) for dll, functions in grouped.items())
