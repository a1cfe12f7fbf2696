from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def grade_confusion_fixture():
    """Reference two-observer 5x5 grade confusion matrix (290 cases)."""
    return np.loadtxt(FIXTURES / "two_observer_grade_confusion.csv", delimiter=",", dtype=np.int64)


def records_from_confusion(matrix):
    """Expand a confusion matrix into per-case grade records for 2 observers."""
    from cardiseg.stats import GradeRecord

    records = []
    case = 0
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            for _ in range(int(matrix[i, j])):
                records.append(GradeRecord(f"case{case:04d}", "obs_a", i + 1))
                records.append(GradeRecord(f"case{case:04d}", "obs_b", j + 1))
                case += 1
    return records
