import pytest
from hypothesis import given, strategies as st

from cforge import domain
from cforge.domain import (
    AGE_ATTRIBUTES,
    ATTRIBUTES,
    AttributeVector,
    CellReport,
    DetectionReport,
    Demographic,
    DomainError,
    FaceRecord,
    FilterVerdict,
    Identity,
    NON_AGE_ATTRIBUTES,
    SurveyLabel,
    UnknownDemographic,
    canonical_attributes,
    parse_demographic,
    record_from_json,
    record_to_json,
    specificity_reason,
)


class TestCanonicalAttributes:
    def test_count_and_endpoints(self):
        attrs = canonical_attributes()
        assert len(attrs) == 19
        assert attrs[0] == "glasses"
        assert attrs[18] == "young"

    def test_age_class_members(self):
        attrs = canonical_attributes()
        assert sum(1 for a in attrs if a in AGE_ATTRIBUTES) == 2
        assert set(AGE_ATTRIBUTES) == {"old", "young"}

    def test_pure_and_constant(self):
        assert canonical_attributes() == canonical_attributes()
        assert len(NON_AGE_ATTRIBUTES) == 17

    def test_tokens_are_snake_case(self):
        for a in ATTRIBUTES:
            assert a == a.lower()
            assert " " not in a


class TestParseDemographic:
    def test_known_codes(self):
        assert parse_demographic("BM") == Demographic("black", "male")
        assert parse_demographic("AM") == Demographic("east_asian", "male")
        assert parse_demographic("IF") == Demographic("indian", "female")
        assert parse_demographic("WF") == Demographic("white", "female")

    def test_case_insensitive(self):
        assert parse_demographic("bm") == Demographic("black", "male")

    def test_rejects_unknown(self):
        with pytest.raises(UnknownDemographic):
            parse_demographic("XX")
        with pytest.raises(UnknownDemographic):
            parse_demographic("")

    def test_code_bijection(self):
        codes = {parse_demographic(c).code for c in domain.DEMOGRAPHIC_CODES}
        assert codes == set(domain.DEMOGRAPHIC_CODES)
        assert len(domain.DEMOGRAPHICS) == 8


class TestAttributeVector:
    def test_requires_exactly_17_flags(self):
        with pytest.raises(DomainError):
            AttributeVector({"glasses": True}, 30)
        flags = {a: False for a in NON_AGE_ATTRIBUTES}
        flags["old"] = False
        with pytest.raises(DomainError):
            AttributeVector(flags, 30)

    def test_canonical_flag_order(self):
        vec = AttributeVector({a: False for a in reversed(NON_AGE_ATTRIBUTES)}, 25)
        assert list(vec.flags) == list(NON_AGE_ATTRIBUTES)

    def test_from_true(self):
        vec = AttributeVector.from_true(["smile"], 40)
        assert vec.flags["smile"] and not vec.flags["glasses"]
        assert vec.age_years == 40

    def test_negative_age_rejected(self):
        with pytest.raises(DomainError):
            AttributeVector.from_true([], -1)


class TestFaceRecordInvariants:
    def test_transformed_needs_parent_and_attribute(self):
        with pytest.raises(DomainError):
            FaceRecord("f", "i", 0, "transformed", "0" * 64, {})

    def test_source_cannot_have_parent(self):
        with pytest.raises(DomainError):
            FaceRecord("f", "i", 0, "source", "0" * 64, {}, parent_face_id="p")


class TestFilterVerdict:
    def test_accept_iff_no_reasons(self):
        with pytest.raises(DomainError):
            FilterVerdict("f", True, ("DISTORTED",))
        with pytest.raises(DomainError):
            FilterVerdict("f", False, ())

    def test_unknown_reason_rejected(self):
        with pytest.raises(DomainError):
            FilterVerdict("f", False, ("BANANA",))

    def test_parameterized_reason(self):
        v = FilterVerdict("f", False, (specificity_reason("smile"),))
        assert v.reasons == ("SPECIFICITY_VIOLATION(smile)",)


def _sample_records():
    demo = parse_demographic("WF")
    identity = Identity("WF-001", "Name", demo, True, identity_validated=True)
    source = FaceRecord("s1", "WF-001", 0, "source", "a" * 64, {"seed": 1, "prompt": "p"})
    transformed = FaceRecord(
        "t1", "WF-001", 0, "transformed", "b" * 64, {"seed": 2, "hyperparams": {"k": 1.0}},
        applied_attribute="smile", parent_face_id="s1",
    )
    detection = DetectionReport("t1", AttributeVector.from_true(["smile"], 31), 0.25, False, {"age": "v1"})
    verdict = FilterVerdict("t1", False, ("AGE_DRIFT_EXCEEDED",))
    label = SurveyLabel("t1", "distortion", "not_distorted", 3)
    report = CellReport("smile", "WF", None, 5, efficacy=0.8)
    return [identity, source, transformed, detection, verdict, label, report]


class TestSerializationRoundTrip:
    @pytest.mark.parametrize("record", _sample_records(), ids=lambda r: type(r).__name__)
    def test_round_trip_identity(self, record):
        assert record_from_json(record_to_json(record)) == record

    def test_strict_rejects_unknown_fields(self):
        body = record_to_json(_sample_records()[0])
        body["mystery"] = 1
        with pytest.raises(domain.MalformedRecord):
            record_from_json(body, strict=True)
        assert record_from_json(body, strict=False) == _sample_records()[0]

    def test_missing_field_rejected(self):
        body = record_to_json(_sample_records()[0])
        del body["display-name"]
        with pytest.raises(domain.MalformedRecord):
            record_from_json(body)

    @given(
        flags=st.lists(st.booleans(), min_size=17, max_size=17),
        age=st.integers(min_value=0, max_value=110),
        score=st.floats(allow_nan=False, allow_infinity=False, width=32),
        distorted=st.booleans(),
    )
    def test_detection_round_trip_property(self, flags, age, score, distorted):
        vec = AttributeVector(dict(zip(NON_AGE_ATTRIBUTES, flags)), age)
        record = DetectionReport("t1", vec, float(score), distorted, {})
        assert record_from_json(record_to_json(record)) == record
