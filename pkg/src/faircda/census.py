"""Census-income style dataset generator.

Produces a CSV-shaped table with the classic census schema (14 attributes,
income label, gender as the sensitive column) whose group sizes, per-group
positive rates, and feature-label couplings mimic the published statistics
of that benchmark: roughly two-thirds male, positive rate about 31% for men
and 11% for women, gender well-predictable from relationship/occupation/hours
patterns.  Used as the desk-scale stand-in when no real census CSV is on
disk, and as a rich fixture for the ingestion/encoding pipeline.
"""

from __future__ import annotations

import numpy as np

from .data import ColumnSpec, DatasetSchema, RawTable, _parse_rows

CENSUS_HEADER = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]

WORKCLASSES = ["Private", "Self-emp-not-inc", "Self-emp-inc", "Federal-gov",
               "Local-gov", "State-gov", "Without-pay", "Never-worked"]

EDUCATION_BY_NUM = {
    1: "Preschool", 2: "1st-4th", 3: "5th-6th", 4: "7th-8th", 5: "9th", 6: "10th",
    7: "11th", 8: "12th", 9: "HS-grad", 10: "Some-college", 11: "Assoc-voc",
    12: "Assoc-acdm", 13: "Bachelors", 14: "Masters", 15: "Prof-school",
    16: "Doctorate",
}

OCCUPATIONS = ["Tech-support", "Craft-repair", "Other-service", "Sales",
               "Exec-managerial", "Prof-specialty", "Handlers-cleaners",
               "Machine-op-inspct", "Adm-clerical", "Farming-fishing",
               "Transport-moving", "Priv-house-serv", "Protective-serv",
               "Armed-Forces"]
# (base log-weight, skill coefficient, male coefficient)
_OCC_COEFS = np.array([
    (-3.3, 0.4, 0.0),    # Tech-support
    (-2.0, -0.3, 1.3),   # Craft-repair
    (-2.2, -0.6, -0.6),  # Other-service
    (-2.2, 0.1, 0.1),    # Sales
    (-2.1, 0.6, 0.2),    # Exec-managerial
    (-2.1, 0.8, 0.0),    # Prof-specialty
    (-3.1, -0.5, 0.9),   # Handlers-cleaners
    (-2.9, -0.4, 0.6),   # Machine-op-inspct
    (-2.2, 0.0, -1.1),   # Adm-clerical
    (-3.5, -0.3, 0.9),   # Farming-fishing
    (-3.0, -0.3, 1.1),   # Transport-moving
    (-5.2, -0.5, -1.6),  # Priv-house-serv
    (-3.9, 0.0, 0.8),    # Protective-serv
    (-8.0, 0.0, 2.0),    # Armed-Forces
])

RACES = ["White", "Black", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other"]
_RACE_P = [0.854, 0.096, 0.031, 0.010, 0.009]

COUNTRIES = ["United-States", "Mexico", "Philippines", "Germany", "Canada",
             "Puerto-Rico", "El-Salvador", "India", "Cuba", "England", "Jamaica",
             "South", "China", "Italy", "Dominican-Republic", "Vietnam",
             "Guatemala", "Japan", "Poland", "Columbia", "Taiwan", "Haiti",
             "Iran", "Portugal", "Nicaragua", "Peru", "France", "Greece",
             "Ecuador", "Ireland", "Hong", "Cambodia", "Trinadad&Tobago", "Laos",
             "Thailand", "Yugoslavia", "Outlying-US(Guam-USVI-etc)", "Hungary",
             "Honduras", "Scotland", "Holand-Netherlands"]
_COUNTRY_P = np.array([0.896, 0.0215] + [0.0042] * 14 + [0.0012] * 25)

# income model: logit = B0 + B_EDU*(edu-9.5) + B_MALE*male + B_MAR*married
#                + B_HOURS*(hours-40)/10 + B_SKILL*u + B_AGE*(clipped age-38)/10
#                + occupation offset
_B0, _B_EDU, _B_MALE, _B_MAR, _B_HOURS, _B_SKILL, _B_AGE = (
    -3.90, 0.70, 1.15, 1.10, 0.22, 0.35, 0.45)
_OCC_INCOME = np.array([0.21, 0.07, -0.56, 0.14, 0.56, 0.49, -0.42, -0.21, -0.21,
                        -0.35, 0.0, -1.05, 0.21, 0.0])

MISSING_RATE = 0.025


def census_schema(include_sensitive_feature: bool = False) -> DatasetSchema:
    numeric = {"age", "fnlwgt", "education-num", "capital-gain", "capital-loss",
               "hours-per-week"}
    cols = [ColumnSpec(name, "numeric" if name in numeric else "categorical")
            for name in CENSUS_HEADER]
    return DatasetSchema(
        columns=cols,
        label="income",
        label_positive=">50K",
        sensitive="sex",
        sensitive_group1="Female",
        include_sensitive_feature=include_sensitive_feature,
    )


def _choice_rows(rng, probs: np.ndarray) -> np.ndarray:
    # vectorised categorical draw, one row of probabilities per sample
    cum = np.cumsum(probs, axis=1)
    r = rng.random(len(probs))[:, None]
    return (r > cum[:, :-1]).sum(axis=1)


def generate_census_rows(n: int, seed: int) -> list[list[str]]:
    """Generate n CSV rows (strings, header order) of census-like data."""
    rng = np.random.Generator(np.random.PCG64(seed))
    male = (rng.random(n) < 0.669).astype(np.float64)
    u = rng.standard_normal(n)  # latent skill

    married = (rng.random(n) < np.where(male == 1.0, 0.605, 0.150)).astype(np.float64)
    age = np.clip(np.round(17.0 + rng.gamma(2.4, 9.0, n) + 4.0 * married), 17, 90)
    edu_num = np.clip(np.round(10.0 + 2.0 * u + 0.2 * male + rng.standard_normal(n)), 1, 16)
    hours = np.clip(np.round(40.0 + 4.5 * male + 2.0 * u + 3.0 * married * male
                             - 3.5 * (1.0 - male) * married + rng.standard_normal(n) * 7.0),
                    1, 99)

    occ_logits = (_OCC_COEFS[:, 0][None, :]
                  + _OCC_COEFS[:, 1][None, :] * u[:, None]
                  + _OCC_COEFS[:, 2][None, :] * male[:, None])
    occ_p = np.exp(occ_logits)
    occ_p /= occ_p.sum(axis=1, keepdims=True)
    occ_idx = _choice_rows(rng, occ_p)

    logit = (_B0 + _B_EDU * (edu_num - 9.5) + _B_MALE * male + _B_MAR * married
             + _B_HOURS * (hours - 40.0) / 10.0 + _B_SKILL * u
             + _B_AGE * (np.clip(age, 17, 55) - 38.0) / 10.0
             + _OCC_INCOME[occ_idx])
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.float64)

    wc_base = np.array([0.708, 0.079, 0.035, 0.029, 0.064, 0.041, 0.0025, 0.0015])
    wc_p = np.repeat(wc_base[None, :], n, axis=0)
    wc_p[:, 2] *= np.exp(0.5 * u)  # incorporated self-employment tracks skill
    wc_p /= wc_p.sum(axis=1, keepdims=True)
    wc_idx = _choice_rows(rng, wc_p)

    race_idx = _choice_rows(rng, np.repeat(np.array(_RACE_P)[None, :], n, axis=0))
    country_idx = _choice_rows(rng, np.repeat((_COUNTRY_P / _COUNTRY_P.sum())[None, :], n, axis=0))

    gain_mask = rng.random(n) < (0.03 + 0.22 * y)
    cap_gain = np.where(gain_mask, np.round(np.exp(rng.normal(8.4 + 1.2 * y, 0.9, n))), 0.0)
    cap_gain = np.clip(cap_gain, 0, 99999)
    loss_mask = rng.random(n) < (0.035 + 0.025 * y)
    cap_loss = np.where(loss_mask, np.round(rng.normal(1870.0, 320.0, n)), 0.0)
    cap_loss = np.clip(cap_loss, 0, 4356)

    fnlwgt = np.round(np.exp(rng.normal(11.95, 0.48, n)))

    missing = rng.random(n) < MISSING_RATE

    rows: list[list[str]] = []
    for i in range(n):
        is_male = male[i] == 1.0
        if married[i] == 1.0:
            relationship = "Husband" if is_male else "Wife"
            marital = "Married-AF-spouse" if rng.random() < 0.002 else "Married-civ-spouse"
        else:
            rel_p = ([0.55, 0.25, 0.12, 0.08] if is_male else [0.38, 0.22, 0.32, 0.08])
            relationship = ["Not-in-family", "Own-child", "Unmarried", "Other-relative"][
                _choice_rows(rng, np.array([rel_p]))[0]]
            if relationship == "Own-child":
                marital = "Never-married"
            else:
                mar_p = np.array([[0.52, 0.27, 0.07, 0.06, 0.08]])
                marital = ["Never-married", "Divorced", "Widowed", "Separated",
                           "Married-spouse-absent"][_choice_rows(rng, mar_p)[0]]
        workclass = "?" if missing[i] else WORKCLASSES[wc_idx[i]]
        occupation = "?" if missing[i] else OCCUPATIONS[occ_idx[i]]
        rows.append([
            str(int(age[i])),
            workclass,
            str(int(fnlwgt[i])),
            EDUCATION_BY_NUM[int(edu_num[i])],
            str(int(edu_num[i])),
            marital,
            occupation,
            relationship,
            RACES[race_idx[i]],
            "Male" if is_male else "Female",
            str(int(cap_gain[i])),
            str(int(cap_loss[i])),
            str(int(hours[i])),
            COUNTRIES[country_idx[i]],
            ">50K" if y[i] == 1.0 else "<=50K",
        ])
    return rows


def generate_census_table(n: int, seed: int,
                          include_sensitive_feature: bool = False) -> RawTable:
    schema = census_schema(include_sensitive_feature)
    rows = generate_census_rows(n, seed)
    return _parse_rows(CENSUS_HEADER, rows, schema)


def write_census_csv(path, n: int, seed: int):
    rows = generate_census_rows(n, seed)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CENSUS_HEADER) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
