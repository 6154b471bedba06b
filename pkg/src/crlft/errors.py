"""Exception types shared across the package."""


class CrlftError(Exception):
    """Base class for all package errors."""


# corpus

class MalformedRecord(CrlftError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class UnknownClass(CrlftError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown class {name!r}")


class EmptyDataset(CrlftError):
    pass


class EmptyResult(CrlftError):
    pass


class InvalidSpec(CrlftError):
    pass


class UnmappableConversation(CrlftError):
    def __init__(self, conv_id: str, reason: str = ""):
        self.conv_id = conv_id
        super().__init__(f"conversation {conv_id!r} cannot be mapped: {reason}")


# templating

class ReservedStringInText(CrlftError):
    pass


class UnknownSymbol(CrlftError):
    def __init__(self, position: int, symbol: str = ""):
        self.position = position
        self.symbol = symbol
        super().__init__(f"unknown symbol {symbol!r} at position {position}")


# policy

class InvalidConfig(CrlftError):
    pass


class OutOfVocab(CrlftError):
    pass


class BackendUnsupported(CrlftError):
    pass


# trainer

class EmptyBatch(CrlftError):
    pass


class NonPositiveWeight(CrlftError):
    pass


# oracle

class EmptySlot(CrlftError):
    def __init__(self, x, c):
        self.x = x
        self.c = c
        super().__init__(f"conditioning slot ({x}, {c}) has no mass")


class DegenerateSlice(CrlftError):
    pass


class SupportViolation(CrlftError):
    pass


class ShapeMismatch(CrlftError):
    pass


# evalharness

class UnknownPrompt(CrlftError):
    def __init__(self, prompt: str):
        self.prompt = prompt
        super().__init__(f"prompt {prompt!r} not covered by scorer")
