"""Structured errors carried through to the CLI's error report."""


class ConeminError(Exception):
    """Base error; carries enough structure for machine-readable reports."""

    def __init__(self, module: str, op: str, invariant: str, detail: str = ""):
        self.module = module
        self.op = op
        self.invariant = invariant
        self.detail = detail
        super().__init__(f"[{module}.{op}] {invariant}" + (f": {detail}" if detail else ""))

    def to_dict(self) -> dict:
        return {
            "module": self.module,
            "op": self.op,
            "invariant": self.invariant,
            "detail": self.detail,
        }


class DomainError(ConeminError):
    """Argument outside an operation's stated domain."""


class GeometryError(ConeminError):
    """Geometric degeneracy: broken triangle inequality, flipped face, lost chart."""


class SolverError(ConeminError):
    """Iteration failed to converge; detail names the failure mode."""

    def __init__(self, module, op, invariant, detail="", trace=None):
        super().__init__(module, op, invariant, detail)
        self.trace = trace
