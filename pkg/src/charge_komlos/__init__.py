"""Charges on finite set algebras and Komlos-type extraction with certificates."""
from .charge import (
    Charge,
    ProbabilityCharge,
    absolute,
    charge,
    is_abs_continuous,
    is_singular,
    lebesgue_decompose,
    meet,
    join,
    orthogonal_ladder,
    outer_measure,
    probability,
    uniform,
    variation_norm,
)
from .komlos import (
    KomlosConfig,
    extract_independent,
    extract_positive,
    extract_signed,
    extract_unbounded,
    test_asymptotic_orthogonality,
)
from .set_algebra import Partition, SetAlgebra, make_algebra, make_product, power_set_algebra
from .slln import SLLNConfig, run_slln
from .vector_charge import SampleSpace, VectorCharge, extract_vector

__version__ = "0.1.0"
