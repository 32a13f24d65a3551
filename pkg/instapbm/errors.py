class InstaPBMError(Exception):
    pass


class ValidationError(InstaPBMError, ValueError):
    """ Bad shapes, ranges, configs or inputs. CLI exit code 1. """


class NumericalError(InstaPBMError, ArithmeticError):
    """ A computation left its numerical domain. CLI exit code 2. """


class ShapeError(ValidationError):
    pass


class DomainError(NumericalError):
    pass


class NonFiniteLossError(NumericalError):
    def __init__(self, term, value):
        self.term = term
        self.value = value
        super().__init__('Loss term {} is not finite ({})'.format(term, value))
