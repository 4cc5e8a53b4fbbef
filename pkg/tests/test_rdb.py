from datetime import datetime

import numpy as np
import pytest

from relgnn.rdb import (
    RdbError,
    load_database,
    remove_target_column,
    target_labels,
    validate_schema,
    write_dataset,
)


def test_load_patients_fixture(fixtures_dir):
    db = load_database(fixtures_dir / "patients_small")
    assert len(db.tables) == 2
    assert [t.nrows for t in db.tables] == [2, 3]
    patient = db.table("Patient")
    assert patient.cell(0, patient.column_index("age")) == 34.0
    assert patient.cell(1, patient.column_index("weight")) is None
    visit = db.table("Visit")
    assert visit.cell(0, visit.column_index("visit_date")) == datetime(2020, 1, 1)
    assert visit.cell(1, visit.column_index("visit_date")) == datetime(2020, 2, 14, 9, 30)


def test_load_empty_table(tmp_path):
    (tmp_path / "schema.json").write_text(
        '{"tables": [{"name": "T", "file": "T.csv", "columns": ['
        '{"name": "id", "kind": "primary_key"},'
        '{"name": "label", "kind": "categorical", "target": true}]}]}'
    )
    (tmp_path / "T.csv").write_text("id,label\n")
    db = load_database(tmp_path)
    assert db.tables[0].nrows == 0


def test_missing_csv_errors(tmp_path):
    (tmp_path / "schema.json").write_text(
        '{"tables": [{"name": "T", "file": "T.csv", "columns": [{"name": "id", "kind": "primary_key"}]}]}'
    )
    with pytest.raises(RdbError, match="missing file"):
        load_database(tmp_path)


def test_undeclared_column_errors(tmp_path):
    (tmp_path / "schema.json").write_text(
        '{"tables": [{"name": "T", "file": "T.csv", "columns": [{"name": "id", "kind": "primary_key"}]}]}'
    )
    (tmp_path / "T.csv").write_text("id,extra\nr1,1\n")
    with pytest.raises(RdbError, match="undeclared column 'extra'"):
        load_database(tmp_path)


def test_unparseable_cell_names_location(tmp_path):
    (tmp_path / "schema.json").write_text(
        '{"tables": [{"name": "T", "file": "T.csv", "columns": ['
        '{"name": "id", "kind": "primary_key"}, {"name": "x", "kind": "scalar"}]}]}'
    )
    (tmp_path / "T.csv").write_text("id,x\nr1,banana\n")
    with pytest.raises(RdbError, match="table T row 0 column x"):
        load_database(tmp_path)


def test_out_of_range_latlong_rejected(tmp_path):
    (tmp_path / "schema.json").write_text(
        '{"tables": [{"name": "T", "file": "T.csv", "columns": ['
        '{"name": "id", "kind": "primary_key"}, {"name": "pos", "kind": "latlong"}]}]}'
    )
    (tmp_path / "T.csv").write_text('id,pos\nr1,"91.0,10.0"\n')
    with pytest.raises(RdbError, match="out-of-range"):
        load_database(tmp_path)


def test_dangling_fk_strict_names_cell(fixtures_dir):
    with pytest.raises(RdbError, match="Visit row 1 column patient_id"):
        load_database(fixtures_dir / "dangling", strict=True)


def test_dangling_fk_nonstrict_keeps_null_edge(fixtures_dir):
    with pytest.warns(UserWarning, match="dangling"):
        db = load_database(fixtures_dir / "dangling", strict=False)
    assert db.dangling == [("Visit", 1, "patient_id", "p9")]
    visit = db.table("Visit")
    assert visit.cell(1, visit.column_index("patient_id")) is None
    assert list(db.fk_rows[(1, 1)]) == [0, -1]


def test_literal_null_string_is_data(tmp_path):
    (tmp_path / "schema.json").write_text(
        '{"tables": [{"name": "T", "file": "T.csv", "columns": ['
        '{"name": "id", "kind": "primary_key"}, {"name": "c", "kind": "categorical"}]}]}'
    )
    (tmp_path / "T.csv").write_text("id,c\nr1,null\nr2,\n")
    db = load_database(tmp_path)
    col = db.tables[0].columns[1]
    assert col.values == ["null", None]


def test_validate_patients_fixture(fixtures_dir):
    report = validate_schema(load_database(fixtures_dir / "patients_small"))
    assert report.target == "Patient.label"
    assert report.fk_resolution["Visit.patient_id"] == (3, 3)
    assert report.null_rate["Patient.weight"] == 0.5
    assert report.null_rate["Visit.cost"] == 0.0
    assert report.categorical_cardinality["Patient.label"] == 2
    assert "tables: 2" in report.render()


def test_validate_requires_target(fixtures_dir):
    db = load_database(fixtures_dir / "patients_small")
    db.target_flags.clear()
    with pytest.raises(RdbError, match="no target column"):
        validate_schema(db)


def test_validate_rejects_multiple_targets(fixtures_dir):
    db = load_database(fixtures_dir / "patients_small")
    db.target_flags.append((1, 2))
    with pytest.raises(RdbError, match="multiple target columns"):
        validate_schema(db)


def test_mask_and_label_accessor(fixtures_dir):
    db = load_database(fixtures_dir / "patients_small")
    masked = remove_target_column(db)
    patient = masked.table("Patient")
    label_col = patient.column_index("label")
    assert [patient.cell(r, label_col) for r in range(2)] == [None, None]
    assert list(target_labels(masked)) == [1, 0]
    # non-target columns untouched, and the original is not mutated
    assert masked.table("Patient").columns[1].values == db.table("Patient").columns[1].values
    assert db.table("Patient").columns[label_col].values == ["1", "0"]


def test_mask_is_idempotent(fixtures_dir):
    db = load_database(fixtures_dir / "patients_small")
    once = remove_target_column(db)
    twice = remove_target_column(once)
    assert twice is once
    assert list(target_labels(twice)) == [1, 0]


def test_masked_view_hides_target_from_all_accessors(fixtures_dir):
    masked = remove_target_column(load_database(fixtures_dir / "patients_small"))
    kt, kc = masked.target
    table = masked.tables[kt]
    assert all(v is None for v in table.columns[kc].values)
    assert all(table.cell(r, kc) is None for r in range(table.nrows))


def test_roundtrip_identical(fixtures_dir, tmp_path):
    for name in ("patients_small", "clinic", "employees"):
        db = load_database(fixtures_dir / name)
        write_dataset(db, tmp_path / name)
        again = load_database(tmp_path / name)
        assert [t.name for t in again.tables] == [t.name for t in db.tables]
        for ta, tb in zip(db.tables, again.tables):
            for ca, cb in zip(ta.columns, tb.columns):
                assert ca.kind == cb.kind and ca.target == cb.target
                assert ca.values == cb.values


def test_roundtrip_latlong_and_text(tmp_path):
    (tmp_path / "in").mkdir()
    (tmp_path / "in" / "schema.json").write_text(
        '{"tables": [{"name": "T", "file": "T.csv", "columns": ['
        '{"name": "id", "kind": "primary_key"},'
        '{"name": "pos", "kind": "latlong"},'
        '{"name": "note", "kind": "text"},'
        '{"name": "label", "kind": "categorical", "target": true}]}]}'
    )
    (tmp_path / "in" / "T.csv").write_text(
        'id,pos,note,label\nr1,"45.5,-120.25","two words, comma",1\nr2,,,0\n'
    )
    db = load_database(tmp_path / "in")
    assert db.tables[0].columns[1].values == [(45.5, -120.25), None]
    write_dataset(db, tmp_path / "out")
    again = load_database(tmp_path / "out")
    for ca, cb in zip(db.tables[0].columns, again.tables[0].columns):
        assert ca.values == cb.values


def test_fk_counts_match_validate(fixtures_dir):
    db = load_database(fixtures_dir / "clinic")
    report = validate_schema(db)
    assert report.fk_resolution["Visit.patient_id"] == (3, 3)
    assert report.fk_resolution["Visit.doctor_id"] == (2, 2)
    assert list(db.fk_rows[(1, 2)]) == [0, -1, 0]


def test_duplicate_primary_key_rejected(tmp_path):
    (tmp_path / "schema.json").write_text(
        '{"tables": [{"name": "A", "file": "A.csv", "columns": [{"name": "id", "kind": "primary_key"}]},'
        '{"name": "B", "file": "B.csv", "columns": ['
        '{"name": "id", "kind": "primary_key"},'
        '{"name": "a_id", "kind": "foreign_key", "references": {"table": "A", "column": "id"}}]}]}'
    )
    (tmp_path / "A.csv").write_text("id\nx\nx\n")
    (tmp_path / "B.csv").write_text("id,a_id\nb1,x\n")
    with pytest.raises(RdbError, match="duplicate key"):
        load_database(tmp_path)


def test_fk_reference_must_exist_in_schema(tmp_path):
    (tmp_path / "schema.json").write_text(
        '{"tables": [{"name": "B", "file": "B.csv", "columns": ['
        '{"name": "id", "kind": "primary_key"},'
        '{"name": "a_id", "kind": "foreign_key", "references": {"table": "Nope", "column": "id"}}]}]}'
    )
    (tmp_path / "B.csv").write_text("id,a_id\n")
    with pytest.raises(RdbError, match="references unknown table"):
        load_database(tmp_path)


def test_labels_never_in_masked_reads_property(fixtures_dir):
    # every read path over every table/column/row never yields a raw label token
    masked = remove_target_column(load_database(fixtures_dir / "clinic"))
    tokens = {"0", "1"}
    kt, kc = masked.target
    for ti, table in enumerate(masked.tables):
        for ci, col in enumerate(table.columns):
            if (ti, ci) == (kt, kc):
                seen = {table.cell(r, ci) for r in range(table.nrows)}
                assert seen <= {None} and not (seen & tokens)
    assert set(target_labels(masked)) == {0, 1}
