"""Exception types shared across the toolkit."""


class FbfqError(Exception):
    """Base class for every toolkit error."""


class EncodeRange(FbfqError):
    """Value cannot be represented as a finite binary16."""


class InvalidInput(FbfqError):
    """Quantizer input contains NaN or infinity."""


class ShapeError(FbfqError):
    """Operand dimensions are missing, mismatched, or not superblock-aligned."""


class FormatError(FbfqError):
    """Byte-level layout violation in a superblock, payload, or file."""


class Truncated(FormatError):
    """Input ended before a complete structure could be read."""


class BadMagic(FormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersion(FormatError):
    """Container version is outside the supported range."""


class UnsupportedType(FbfqError):
    """Tensor type has no codec in this toolkit."""


class IllegalOpcode(FormatError):
    """Instruction word is not a valid opcode."""

    def __init__(self, word_index: int, word: int):
        self.word_index = word_index
        self.word = word
        super().__init__(f"illegal opcode word 0x{word:08x} at word {word_index}")


class PlanError(FbfqError):
    """Tile plan is inconsistent with the operands or dimensions."""


class CapacityError(FbfqError):
    """No legal tile fits the given accelerator capacities."""


class CapacityFault(FbfqError):
    """Simulated cache or buffer overflow."""


class ProtocolFault(FbfqError):
    """Instruction sequence violates the accelerator protocol."""


class EmptyOutput(FbfqError):
    """Output queue drained while empty."""
