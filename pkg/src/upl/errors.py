"""Exception hierarchy.

DataError covers malformed files and unsatisfiable episode requests (CLI
exit code 3); NumericError covers NaN/Inf contract violations (exit code 4).
Plain ValueError is used for ordinary API misuse such as shape mismatches.
"""


class UplError(Exception):
    pass


class DataError(UplError):
    pass


class NumericError(UplError):
    pass
