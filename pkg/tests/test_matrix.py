import random

import pytest

from cforge.domain import AttributeVector, NON_AGE_ATTRIBUTES
from cforge.matrix import (
    AgeAttributeNotApplicable,
    MalformedMatrix,
    SpecCode,
    TransitionMatrix,
    apply_exact_edit,
    check_specificity,
    default_matrix,
    dump_matrix,
    load_matrix,
)


def vec(true_attrs=(), age=30):
    return AttributeVector.from_true(true_attrs, age)


def random_vector(rng, exclude=()):
    return AttributeVector.from_true(
        [a for a in NON_AGE_ATTRIBUTES if a not in exclude and rng.random() < 0.5], 30
    )


class TestDefaultMatrix:
    def test_diagonal_must_be_present(self):
        m = default_matrix()
        for a in NON_AGE_ATTRIBUTES:
            assert m.cell(a, a) is SpecCode.MUST_BE_PRESENT

    def test_facemask_row_overrides(self):
        m = default_matrix()
        assert m.cell("facemask", "smile") is SpecCode.MUST_BE_ABSENT
        assert m.cell("facemask", "red_lipstick") is SpecCode.MUST_BE_ABSENT
        for facial_hair in ("mustache", "goatee", "thick_beard"):
            assert m.cell("facemask", facial_hair) is SpecCode.IGNORE

    def test_sunglasses_glasses_ignore(self):
        assert default_matrix().cell("sunglasses", "glasses") is SpecCode.IGNORE

    def test_makeup_lipstick_coincide(self):
        m = default_matrix()
        assert m.cell("heavy_makeup", "red_lipstick") is SpecCode.IGNORE
        assert m.cell("red_lipstick", "heavy_makeup") is SpecCode.IGNORE

    def test_facial_hair_mutual_ignores(self):
        m = default_matrix()
        for a, b in [("thick_beard", "mustache"), ("thick_beard", "goatee"),
                     ("goatee", "mustache"), ("goatee", "thick_beard"),
                     ("mustache", "goatee"), ("mustache", "thick_beard")]:
            assert m.cell(a, b) is SpecCode.IGNORE

    def test_everything_else_preserves(self):
        m = default_matrix()
        assert m.cell("smile", "glasses") is SpecCode.PRESERVE_FROM_SOURCE
        assert m.cell("blue_hair", "smile") is SpecCode.PRESERVE_FROM_SOURCE


class TestLoadDump:
    def test_round_trip_equals_default(self):
        m = default_matrix()
        assert load_matrix(dump_matrix(m)) == m

    def test_invalid_code_rejected(self):
        text = dump_matrix(default_matrix()).replace(",-1", ",3", 1)
        with pytest.raises(MalformedMatrix):
            load_matrix(text)

    def test_missing_column_rejected(self):
        lines = dump_matrix(default_matrix()).splitlines()
        header = lines[0].split(",")
        idx = header.index("pigtails")
        broken = "\n".join(",".join(c for i, c in enumerate(ln.split(",")) if i != idx) for ln in lines)
        with pytest.raises(MalformedMatrix):
            load_matrix(broken)

    def test_missing_row_rejected(self):
        lines = dump_matrix(default_matrix()).splitlines()
        with pytest.raises(MalformedMatrix):
            load_matrix("\n".join(lines[:-1]))

    def test_non_present_diagonal_rejected(self):
        rows = {a: dict.fromkeys(NON_AGE_ATTRIBUTES, SpecCode.PRESERVE_FROM_SOURCE) for a in NON_AGE_ATTRIBUTES}
        for a in NON_AGE_ATTRIBUTES:
            rows[a][a] = SpecCode.MUST_BE_PRESENT
        rows["smile"]["smile"] = SpecCode.IGNORE
        with pytest.raises(MalformedMatrix):
            TransitionMatrix(rows)

    def test_empty_rejected(self):
        with pytest.raises(MalformedMatrix):
            load_matrix("")


class TestCheckSpecificity:
    def test_exact_intended_change_passes(self):
        out = check_specificity("smile", vec(), vec(["smile"]), default_matrix())
        assert out == []

    def test_facemask_obscures_mustache(self):
        source = vec(["mustache"])
        transformed = vec(["facemask"])
        assert check_specificity("facemask", source, transformed, default_matrix()) == []

    def test_unintended_smile_flagged(self):
        # smile is preserve-from-source and the source lacked it
        out = check_specificity("blue_hair", vec(), vec(["blue_hair", "smile"]), default_matrix())
        assert out == ["smile"]

    def test_violations_in_canonical_order(self):
        out = check_specificity(
            "blue_hair", vec(), vec(["blue_hair", "smile", "glasses", "scarf"]), default_matrix()
        )
        assert out == ["glasses", "scarf", "smile"]
        assert out == sorted(out, key=NON_AGE_ATTRIBUTES.index)

    def test_missing_applied_attribute_flagged(self):
        out = check_specificity("smile", vec(), vec(), default_matrix())
        assert out == ["smile"]

    def test_age_attribute_rejected(self):
        with pytest.raises(AgeAttributeNotApplicable):
            check_specificity("old", vec(), vec(), default_matrix())

    def test_pure(self):
        src, dst = vec(["glasses"]), vec(["glasses", "smile"])
        m = default_matrix()
        assert check_specificity("smile", src, dst, m) == check_specificity("smile", src, dst, m)


class TestExactChangeProperties:
    """Exact single-attribute edits pass; for rows that force targets absent
    (facemask), the bit-flip form holds on compatible sources and the
    occlusion-aware form holds unconditionally."""

    def test_bit_flip_exact_change_passes_on_compatible_sources(self):
        m = default_matrix()
        rng = random.Random(2024)
        forced_absent = {
            a: [t for t, code in m.row(a).items() if code is SpecCode.MUST_BE_ABSENT]
            for a in NON_AGE_ATTRIBUTES
        }
        for applied in NON_AGE_ATTRIBUTES:
            for _ in range(200):
                source = random_vector(rng, exclude=[applied, *forced_absent[applied]])
                transformed = source.with_flag(applied, True)
                assert check_specificity(applied, source, transformed, m) == []

    def test_perfect_edit_passes_for_any_source(self):
        m = default_matrix()
        rng = random.Random(99)
        for applied in NON_AGE_ATTRIBUTES:
            for _ in range(200):
                source = random_vector(rng, exclude=[applied])
                transformed = apply_exact_edit(applied, source, m)
                assert check_specificity(applied, source, transformed, m) == []

    def test_ignore_monotonicity(self):
        base = default_matrix()
        rng = random.Random(5)
        for _ in range(300):
            applied = rng.choice(NON_AGE_ATTRIBUTES)
            target = rng.choice([t for t in NON_AGE_ATTRIBUTES if t != applied])
            relaxed = base.with_cell(applied, target, SpecCode.IGNORE)
            source = random_vector(rng)
            transformed = random_vector(rng)
            before = set(check_specificity(applied, source, transformed, base))
            after = set(check_specificity(applied, source, transformed, relaxed))
            assert after <= before
