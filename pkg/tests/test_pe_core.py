"""
Test cases for the PE parser, validator and rewriter

Test cases can be run with:
    nosetests
    coverage report -m

While debugging just these tests it's convenient to use this:
    nosetests --stop tests/test_pe_core.py:TestParsing

pefile is used as an independent parser and checksum oracle.
"""
import struct
from unittest import TestCase
import pefile
from evasionlab.pe_core import (
    SECURITY_DIRECTORY,
    MalformedSectionTable,
    MissingDosMagic,
    MissingPeSignature,
    TruncatedHeader,
    UnsupportedOptionalHeader,
    LayoutConflict,
    ImportDescriptor,
    ImportFunction,
    add_imports,
    append_overlay,
    append_section,
    build_import_blob,
    compute_checksum,
    group_imports,
    parse_pe,
    rename_section,
    rva_to_offset,
    section_for_rva,
    validate_pe,
    write_pe,
)
from evasionlab.synthetic import COMMON_IMPORTS, DATA, MARKER_IMPORTS, SIGNATURE_IMPORTS, SectionSpec, build_pe
from tests.factories import ImportDescriptorFactory, sample_pe, text_section

OPTIONAL_OFFSET = 0x98  # e_lfanew 0x80 + signature + COFF header
SECTION_TABLE = OPTIONAL_OFFSET + 224


def simple_pe(**kwargs) -> bytes:
    """.text and .data with fixed content plus kernel32 imports in .idata"""
    sections = [text_section(), SectionSpec(".data", b"\x01" * 0x100, DATA)]
    return build_pe(sections, group_imports(COMMON_IMPORTS), **kwargs)


def varied_pe(index: int) -> bytes:
    """A small layout chosen by index, PE32 for even and PE32+ for odd indices"""
    pe32_plus = index % 2 == 1
    sections = [text_section(0x200 + 0x40 * (index % 3))]
    sections += [SectionSpec(f".s{j}", bytes([j + 1]) * (0x60 + 0x90 * j + index), DATA) for j in range(index % 5)]
    pairs = (MARKER_IMPORTS + SIGNATURE_IMPORTS)[:index % 9] + (("ws2_32.dll", f"#{index + 1}"),)
    imports = () if index % 4 == 3 else group_imports(COMMON_IMPORTS + pairs)
    overlay = bytes([index]) * (index * 13) if index % 3 else b""
    return build_pe(sections, imports, pe32_plus=pe32_plus, overlay=overlay, dll=index % 6 == 5,
                    signed=index % 5 == 1)


######################################################################
#  P A R S I N G
######################################################################
class TestParsing(TestCase):
    """Parsing well-formed and malformed files"""

    def test_parse_sections_and_imports(self):
        """It should parse the section table and the import table"""
        image = parse_pe(simple_pe())
        self.assertEqual([s.name for s in image.sections], [".text", ".data", ".idata"])
        self.assertEqual(image.coff_header.num_sections, 3)
        self.assertEqual(image.optional_header.entry_point_rva, 0x1000)
        self.assertEqual(image.sections[0].raw_offset, 0x400)
        self.assertEqual(image.sections[1].virtual_address, 0x2000)
        self.assertEqual(len(image.imports), 1)
        self.assertEqual(image.imports[0].dll_name, "kernel32.dll")
        self.assertEqual([f.name for f in image.imports[0].functions], ["ExitProcess", "GetModuleHandleW"])
        self.assertEqual(image.overlay, b"")

    def test_parse_pe32_plus(self):
        """It should parse 64 bit images and their wide thunks"""
        image = parse_pe(simple_pe(pe32_plus=True))
        self.assertTrue(image.optional_header.is_pe32_plus)
        self.assertEqual(image.optional_header.image_base, 0x140000000)
        self.assertEqual([f.name for f in image.imports[0].functions], ["ExitProcess", "GetModuleHandleW"])

    def test_parse_ordinal_import(self):
        """It should parse imports by ordinal"""
        data = build_pe([text_section()], group_imports([("ws2_32.dll", "#23"), ("ws2_32.dll", "socket")]))
        functions = parse_pe(data).imports[0].functions
        self.assertEqual(functions[0], ImportFunction(ordinal=23))
        self.assertEqual(functions[0].label, "#23")
        self.assertEqual(functions[1].label, "socket")

    def test_parse_overlay(self):
        """It should keep the bytes after the last section as overlay"""
        image = parse_pe(simple_pe(overlay=b"trailing data"))
        self.assertEqual(image.overlay, b"trailing data")
        self.assertEqual(image.overlay_offset, image.sections[-1].raw_end)

    def test_round_trip(self):
        """It should write back byte-identical files and equal images"""
        for data in [simple_pe(), simple_pe(pe32_plus=True), simple_pe(overlay=b"x" * 77)] + \
                [sample_pe(extra) for extra in range(1, 6)]:
            image = parse_pe(data)
            self.assertEqual(write_pe(image), data)
            self.assertEqual(parse_pe(write_pe(image)), image)

    def test_round_trip_varied(self):
        """It should round trip two dozen layouts of both widths"""
        images = [parse_pe(varied_pe(index)) for index in range(24)]
        self.assertEqual(sum(image.optional_header.is_pe32_plus for image in images), 12)
        self.assertTrue(any(image.overlay for image in images))
        self.assertTrue(any(not image.imports for image in images))
        for index, image in enumerate(images):
            data = varied_pe(index)
            self.assertEqual(write_pe(image), data, f"layout {index}")
            self.assertEqual(parse_pe(write_pe(image)), image)
            self.assertEqual(len(pefile.PE(data=data).sections), len(image.sections))
            self.assertTrue(validate_pe(image).is_loadable_shape)

    def test_truncated(self):
        """It should refuse files shorter than the DOS header"""
        self.assertRaises(TruncatedHeader, parse_pe, b"")
        self.assertRaises(TruncatedHeader, parse_pe, b"MZ" + bytes(30))

    def test_missing_magic(self):
        """It should refuse files without MZ"""
        data = bytearray(simple_pe())
        data[0:2] = b"ZM"
        with self.assertRaises(MissingDosMagic) as context:
            parse_pe(bytes(data))
        self.assertEqual(context.exception.offset, 0)

    def test_missing_signature(self):
        """It should refuse files without the PE signature"""
        data = bytearray(simple_pe())
        data[0x80:0x84] = b"NE\0\0"
        self.assertRaises(MissingPeSignature, parse_pe, bytes(data))

    def test_unsupported_optional_header(self):
        """It should refuse unknown optional header magics"""
        data = bytearray(simple_pe())
        struct.pack_into("<H", data, OPTIONAL_OFFSET, 0x999)
        self.assertRaises(UnsupportedOptionalHeader, parse_pe, bytes(data))

    def test_overlapping_sections(self):
        """It should refuse section raw data that overlaps"""
        data = bytearray(simple_pe())
        struct.pack_into("<I", data, SECTION_TABLE + 40 + 20, 0x400)
        self.assertRaises(MalformedSectionTable, parse_pe, bytes(data))

    def test_text_file(self):
        """It should refuse plain text"""
        self.assertRaises(MissingDosMagic, parse_pe, b"this is not an executable, just some text\n" * 3)

    def test_rva_helpers(self):
        """It should map RVAs to file offsets and sections"""
        image = parse_pe(simple_pe())
        self.assertEqual(rva_to_offset(image, 0x1000), 0x400)
        self.assertEqual(rva_to_offset(image, 0x1010), 0x410)
        self.assertEqual(rva_to_offset(image, 0x10), 0x10)
        self.assertIsNone(rva_to_offset(image, 0x90000))
        self.assertEqual(section_for_rva(image, 0x2004), 1)
        self.assertIsNone(section_for_rva(image, 0x90000))


######################################################################
#  V A L I D A T I O N   A N D   C H E C K S U M
######################################################################
class TestValidation(TestCase):
    """Structural validation and the checksum"""

    def test_valid_file(self):
        """It should report no violations on a well-formed file"""
        report = validate_pe(parse_pe(simple_pe()))
        self.assertTrue(report.is_loadable_shape)
        self.assertEqual(report.codes, [])
        self.assertEqual(report.serialize(), {"is_loadable_shape": True, "violations": []})

    def test_entry_point_unmapped(self):
        """It should flag an entry point outside every section"""
        report = validate_pe(parse_pe(simple_pe(entry_point=0x90000)))
        self.assertFalse(report.is_loadable_shape)
        self.assertIn("ENTRYPOINT_UNMAPPED", report.codes)
        self.assertEqual(report.violations[0].offset, OPTIONAL_OFFSET + 16)

    def test_dll_without_entry_point(self):
        """It should accept a DLL whose entry point is zero"""
        report = validate_pe(parse_pe(simple_pe(dll=True, entry_point=0)))
        self.assertTrue(report.is_loadable_shape)
        report = validate_pe(parse_pe(simple_pe(entry_point=0)))
        self.assertIn("ENTRYPOINT_UNMAPPED", report.codes)

    def test_signature_present(self):
        """It should warn about signed files without failing them"""
        report = validate_pe(parse_pe(simple_pe(overlay=b"\x30\x82" * 16, signed=True)))
        self.assertEqual(report.codes, ["SIGNATURE_PRESENT"])
        self.assertEqual(report.violations[0].severity, "warning")
        self.assertTrue(report.is_loadable_shape)

    def test_checksum_of_zero_buffer(self):
        """It should add the length to the folded sum"""
        self.assertEqual(compute_checksum(bytes(1024)), 1024)

    def test_checksum_ignores_its_field(self):
        """It should not depend on the stored checksum"""
        data = bytearray(simple_pe())
        before = compute_checksum(bytes(data))
        struct.pack_into("<I", data, OPTIONAL_OFFSET + 64, 0xDEADBEEF)
        self.assertEqual(compute_checksum(bytes(data)), before)

    def test_checksum_matches_pefile(self):
        """It should agree with pefile on generated files"""
        for data in [simple_pe(), simple_pe(pe32_plus=True), sample_pe(3, overlay=b"abc")]:
            pe = pefile.PE(data=data)
            self.assertEqual(compute_checksum(data), pe.generate_checksum())
            self.assertEqual(pe.OPTIONAL_HEADER.CheckSum, compute_checksum(data))


######################################################################
#  R E W R I T I N G
######################################################################
class TestRewriting(TestCase):
    """The rewriter primitives behind the mutation actions"""

    def setUp(self):
        self.data = simple_pe(overlay=b"tail")
        self.image = parse_pe(self.data)

    def assert_preserved(self, mutant: bytes):
        """Original sections, entry point and imports survive"""
        image = parse_pe(mutant)
        self.assertEqual(validate_pe(image).codes, [])
        self.assertEqual(image.optional_header.entry_point_rva, self.image.optional_header.entry_point_rva)
        for index in range(len(self.image.sections)):
            self.assertEqual(image.section_data(index), self.image.section_data(index))
        self.assertEqual(image.imports[:len(self.image.imports)], self.image.imports)
        return image

    def test_append_section(self):
        """It should append a section after the existing ones"""
        mutant = write_pe(append_section(self.image, ".rsrc", b"\x42" * 300, DATA))
        image = self.assert_preserved(mutant)
        self.assertEqual([s.name for s in image.sections], [".text", ".data", ".idata", ".rsrc"])
        added = image.sections[-1]
        self.assertEqual(added.virtual_address, 0x4000)
        self.assertEqual(added.raw_size, 0x200)
        self.assertEqual(image.section_data(3)[:300], b"\x42" * 300)
        self.assertEqual(image.optional_header.size_of_image, 0x5000)
        self.assertEqual(image.overlay, b"tail")
        self.assertEqual(pefile.PE(data=mutant).OPTIONAL_HEADER.CheckSum, compute_checksum(mutant))

    def test_append_section_without_room(self):
        """It should raise LayoutConflict when the header has no free slot"""
        sections = [text_section()] + [SectionSpec(f".s{i}", b"\x01" * 16, DATA) for i in range(15)]
        image = parse_pe(build_pe(sections))
        self.assertEqual(len(image.sections), 16)
        self.assertRaises(LayoutConflict, append_section, image, ".new", b"\x01", DATA)

    def test_append_section_name(self):
        """It should refuse names longer than eight bytes"""
        self.assertRaises(ValueError, append_section, self.image, ".toolongname", b"\x01", DATA)
        self.assertRaises(ValueError, append_section, self.image, ".rsrc", b"", DATA)

    def test_append_overlay(self):
        """It should append after the existing overlay and keep everything else"""
        mutant = write_pe(append_overlay(self.image, b"MZ benign file"))
        image = self.assert_preserved(mutant)
        self.assertEqual(image.overlay, b"tail" + b"MZ benign file")
        self.assertEqual(image.sections, self.image.sections)

    def test_rename_section(self):
        """It should rename a section in place"""
        image = parse_pe(write_pe(rename_section(self.image, 1, ".rdata")))
        self.assertEqual(image.sections[1].name, ".rdata")
        self.assertEqual(image.section_data(1), self.image.section_data(1))
        self.assertRaises(ValueError, rename_section, self.image, 1, ".123456789")

    def test_add_imports(self):
        """It should rebuild the import table into a new section with the old name"""
        additions = (ImportDescriptorFactory(),)
        mutant = write_pe(add_imports(self.image, additions))
        image = self.assert_preserved(mutant)
        self.assertEqual([s.name for s in image.sections], [".text", ".data", ".idata", ".idata"])
        self.assertEqual(image.imports, self.image.imports + additions)

        pe = pefile.PE(data=mutant)
        dlls = [entry.dll.decode() for entry in pe.DIRECTORY_ENTRY_IMPORT]
        self.assertEqual(dlls, ["kernel32.dll", "user32.dll"])
        names = [i.name.decode() for i in pe.DIRECTORY_ENTRY_IMPORT[1].imports]
        self.assertEqual(names, [f.name for f in additions[0].functions])

    def test_add_imports_pe32_plus(self):
        """It should write wide thunks for 64 bit images"""
        image = parse_pe(simple_pe(pe32_plus=True))
        additions = (ImportDescriptor("advapi32.dll", (ImportFunction("RegCloseKey"), ImportFunction(ordinal=7))),)
        mutant = parse_pe(write_pe(add_imports(image, additions)))
        self.assertEqual(mutant.imports, image.imports + additions)

    def test_append_section_moves_certificate(self):
        """It should repoint the certificate table when the overlay moves"""
        certificate = b"\x30\x82" * 24
        image = parse_pe(simple_pe(overlay=certificate, signed=True))
        before = image.optional_header.data_directories[SECURITY_DIRECTORY]
        self.assertEqual(before.rva, image.overlay_offset)
        mutant = write_pe(append_section(image, ".rsrc", b"\x42" * 700, DATA))
        grown = parse_pe(mutant)
        after = grown.optional_header.data_directories[SECURITY_DIRECTORY]
        self.assertEqual(after.rva, grown.overlay_offset)
        self.assertGreater(after.rva, before.rva)
        self.assertEqual(after.size, before.size)
        self.assertEqual(mutant[after.rva:after.rva + after.size], certificate)
        self.assertEqual(pefile.PE(data=mutant).OPTIONAL_HEADER.DATA_DIRECTORY[SECURITY_DIRECTORY].VirtualAddress,
                         after.rva)

    def test_add_imports_aligns_wide_thunks(self):
        """It should start every 64 bit thunk array on an eight byte boundary"""
        additions = group_imports([("a.dll", "f"), ("b.dll", "g"), ("b.dll", "#9")])
        for wide, width in ((True, 8), (False, 4)):
            blob = build_import_blob(0x5000, b"", additions, wide)
            for index in range(len(additions)):
                lookup, _, _, _, address = struct.unpack_from("<IIIII", blob, index * 20)
                self.assertEqual((lookup - 0x5000) % width, 0)
                self.assertEqual((address - 0x5000) % width, 0)
        image = parse_pe(simple_pe(pe32_plus=True))
        mutant = write_pe(add_imports(image, additions))
        self.assertEqual(parse_pe(mutant).imports, image.imports + additions)
        dlls = [entry.dll.decode() for entry in pefile.PE(data=mutant).DIRECTORY_ENTRY_IMPORT]
        self.assertEqual(dlls, ["kernel32.dll", "a.dll", "b.dll"])

    def test_chained_edits(self):
        """It should keep earlier edits when several are applied in turn"""
        image = self.image
        image = parse_pe(write_pe(append_section(image, ".reloc", b"\x07" * 40, DATA)))
        image = parse_pe(write_pe(add_imports(image, group_imports([("ole32.dll", "CoInitializeEx")]))))
        image = parse_pe(write_pe(append_overlay(image, b"more")))
        self.assertEqual([s.name for s in image.sections], [".text", ".data", ".idata", ".reloc", ".idata"])
        self.assertEqual(image.overlay, b"tailmore")
        self.assertEqual(validate_pe(image).codes, [])
        self.assertEqual(parse_pe(write_pe(image)), image)

    def test_group_imports(self):
        """It should group pairs by DLL in first-seen order"""
        grouped = group_imports([("a.dll", "f"), ("b.dll", "g"), ("a.dll", "#3"), ("a.dll", "f")])
        self.assertEqual(grouped, (
            ImportDescriptor("a.dll", (ImportFunction("f"), ImportFunction(ordinal=3))),
            ImportDescriptor("b.dll", (ImportFunction("g"),)),
        ))
