"""Exception types shared across the package.

ValidationError marks violated data contracts (bad manifests, leaky splits,
malformed probability tables); the CLI maps it to exit code 1.  Everything
else that escapes is a runtime error and maps to exit code 2.
"""


class ValidationError(ValueError):
    """A dataset, config, or input file violates a declared invariant."""


class OracleCapError(ValueError):
    """A brute-force reference implementation was asked to exceed its size cap."""
