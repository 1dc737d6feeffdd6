"""
File formats.

* data: long CSV ``unit,variable,time,value`` (time is 1-based),
* schema: JSON ``{"variables": [{"name", "kind", "levels"?}, ...]}`` in row order,
* fitted parameters: JSON with row-major matrices,
* assignments: CSV ``unit,cluster,tau_1..tau_K`` (clusters 1-based),
* ground truth: JSON with labels, parameters and the noisy units.
"""

import csv
import json

import numpy as np

from .em import MMMParams
from .errors import ValidationError
from .schema import MixedDataset, Schema

DATA_HEADER = ["unit", "variable", "time", "value"]


def _num(x):
    """Shortest repr that round-trips; integers without a trailing ``.0``."""
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def read_schema(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "variables" not in doc:
        raise ValidationError(f"{path}: expected an object with a 'variables' list")
    for i, v in enumerate(doc["variables"]):
        if "name" not in v or "kind" not in v:
            raise ValidationError(f"{path}: variable {i + 1} needs 'name' and 'kind'")
    return Schema.from_list(doc["variables"])


def write_schema(schema, path):
    with open(path, "w") as fh:
        json.dump({"variables": schema.to_list()}, fh, indent=2)
        fh.write("\n")


def read_data(path, schema):
    """Parse a long-format CSV into a dataset; units keep their first-seen order."""
    index = {name: j for j, name in enumerate(schema.names)}
    entries = {}
    units, seen = [], set()
    max_t = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != DATA_HEADER:
            raise ValidationError(f"{path}: header must be {','.join(DATA_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValidationError(f"{path}, row {line}: expected 4 fields, got {len(row)}")
            unit, var, t, value = (x.strip() for x in row)
            if var not in index:
                raise ValidationError(f"{path}, row {line}: variable {var!r} is not declared in the schema")
            try:
                t = int(t)
            except ValueError as exc:
                raise ValidationError(f"{path}, row {line}: time {t!r} is not an integer") from exc
            if t < 1:
                raise ValidationError(f"{path}, row {line}: time must be >= 1")
            try:
                x = float(value)
            except ValueError as exc:
                raise ValidationError(f"{path}, row {line}: value {value!r} of {var!r} is not numeric") from exc
            key = (unit, index[var], t)
            if key in entries:
                raise ValidationError(f"{path}, row {line}: duplicate entry for unit {unit!r}, {var!r}, time {t}")
            if unit not in seen:
                seen.add(unit)
                units.append(unit)
            entries[key] = x
            max_t = max(max_t, t)
    if not units:
        raise ValidationError(f"{path}: no data rows")
    values = np.full((len(units), schema.J, max_t), np.nan)
    upos = {u: i for i, u in enumerate(units)}
    for (u, j, t), x in entries.items():
        values[upos[u], j, t - 1] = x
    missing = np.argwhere(np.isnan(values))
    if missing.size:
        i, j, t = missing[0]
        raise ValidationError(
            f"{path}: missing value for unit {units[i]!r}, variable {schema.names[j]!r}, time {t + 1}"
        )
    return MixedDataset(schema, values, tuple(units))


def write_data(ds, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DATA_HEADER)
        for i, unit in enumerate(ds.units):
            for j, name in enumerate(ds.schema.names):
                for t in range(ds.T):
                    w.writerow([unit, name, t + 1, _num(ds.values[i, j, t])])


def params_document(result, schema=None):
    """JSON-ready description of a fit: parameters, history, BIC, seed and config."""
    doc = result.params.to_dict()
    if schema is not None:
        doc["rows"] = list(schema.names)
    doc.update(
        loglik_history=[float(x) for x in result.loglik_history],
        bic=float(result.bic),
        iterations=int(result.iterations),
        converged=bool(result.converged),
        seed=int(result.seed),
        config=result.config.to_dict() if result.config is not None else None,
    )
    return doc


def write_json(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def write_params(result, path, schema=None):
    write_json(params_document(result, schema), path)


def read_params(path):
    return MMMParams.from_dict(read_json(path))


def write_assignments(result, units, path):
    K = result.tau.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "cluster"] + [f"tau_{k + 1}" for k in range(K)])
        for unit, c, row in zip(units, result.assignments, result.tau):
            w.writerow([unit, int(c) + 1] + [repr(float(x)) for x in row])


def read_assignments(path):
    """Units and 1-based cluster labels from an assignments CSV."""
    units, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["unit", "cluster"]:
            raise ValidationError(f"{path}: header must start with unit,cluster")
        for line, row in enumerate(reader, start=2):
            try:
                labels.append(int(row[1]))
            except (IndexError, ValueError) as exc:
                raise ValidationError(f"{path}, row {line}: bad cluster field") from exc
            units.append(row[0])
    return units, np.asarray(labels)


def write_loglik_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loglik"])
        for it, ll in enumerate(history, start=1):
            w.writerow([it, repr(float(ll))])


def write_truth(truth, units, path, gen_config=None):
    doc = {
        "units": list(units),
        "labels": [int(x) for x in truth.labels],
        "noisy_units": [units[i] for i in truth.noisy_units],
        "params": truth.params.to_dict(),
    }
    if gen_config is not None:
        doc["generator"] = gen_config.to_dict()
    write_json(doc, path)


def read_truth(path):
    doc = read_json(path)
    for key in ("units", "labels", "params"):
        if key not in doc:
            raise ValidationError(f"{path}: missing field {key!r}")
    return doc
