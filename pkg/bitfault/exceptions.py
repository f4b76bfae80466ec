"""
Exceptions raised while building, training, attacking or evaluating networks
"""


class BaseBitfaultException(Exception):
    DEFAULT_MESSAGE = ''  # type: str

    def __init__(self, message=None, *args):
        super(BaseBitfaultException, self).__init__(*args)
        self.message = message or self.DEFAULT_MESSAGE

    def __str__(self):
        return str(self.message)


class ConfigurationException(BaseBitfaultException):
    DEFAULT_MESSAGE = 'Invalid option specified'


class RangeException(ConfigurationException):
    DEFAULT_MESSAGE = 'Value is outside of the allowed range'


class ShapeException(BaseBitfaultException):
    """A tensor did not have the shape that a layer expected. Capture the layer name for context."""
    DEFAULT_MESSAGE = 'Tensor shape does not match'

    def __init__(self, *args, layer=None):
        super(ShapeException, self).__init__(*args)
        self.layer = layer


class NumericException(BaseBitfaultException):
    """A loss or activation became non-finite"""
    DEFAULT_MESSAGE = 'Encountered a non-finite value'

    def __init__(self, *args, layer=None):
        super(NumericException, self).__init__(*args)
        self.layer = layer


class TrainingDivergedException(NumericException):
    DEFAULT_MESSAGE = 'Training diverged; stopping'

    def __init__(self, *args, losses: list = None, **kwargs):
        super(TrainingDivergedException, self).__init__(*args, **kwargs)
        self.losses = losses


class ParseException(BaseBitfaultException):
    """A file could not be read. Where known, `offset` is the byte position at which parsing failed."""
    DEFAULT_MESSAGE = 'Could not parse file'

    def __init__(self, *args, offset=None, line=None):
        super(ParseException, self).__init__(*args)
        self.offset = offset
        self.line = line


class LineParseException(ParseException):
    DEFAULT_MESSAGE = 'Could not parse specified line'


class CheckpointException(ParseException):
    DEFAULT_MESSAGE = 'Checkpoint does not match the network'


class TooManyBadLinesException(BaseBitfaultException):
    DEFAULT_MESSAGE = 'Too many lines in the file failed to parse; stopping'

    def __init__(self, *args, error_list: list = None, **kwargs):
        super(TooManyBadLinesException, self).__init__(*args)
        self.error_list = error_list
