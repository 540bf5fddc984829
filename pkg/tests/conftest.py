from dataclasses import dataclass

import pytest

from soundmtl.datasets import FoldPlan, SyntheticSpec, generate_synthetic_corpus, samples_from_manifest
from soundmtl.features import FeatureOptions, extract_dataset


@dataclass
class DeskData:
    root: object
    scene_manifest: dict
    event_manifest: dict
    scene_samples: list
    event_samples: list
    scene_plan: FoldPlan
    event_plan: FoldPlan


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """Default synthetic corpus (3 scenes, 4 events, 40 recordings each), extracted at desk scale."""
    root = tmp_path_factory.mktemp("synthetic")
    sm, em = generate_synthetic_corpus(SyntheticSpec(), root)
    s_imgs, s_man = extract_dataset(sm, FeatureOptions.desk_scale("triple"), root)
    e_imgs, e_man = extract_dataset(em, FeatureOptions.desk_scale("mono"), root)
    return DeskData(root, s_man, e_man, samples_from_manifest(s_imgs, s_man), samples_from_manifest(e_imgs, e_man),
                    FoldPlan.from_manifest(s_man), FoldPlan.from_manifest(e_man))


_CRITERIA = []


class _Criterion:
    def __init__(self, name):
        self.name, self.notes = name, []

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        _CRITERIA.append((self.name, exc_type is None, "; ".join(self.notes)))
        print(f"{'PASS' if exc_type is None else 'FAIL'} {self.name}: {'; '.join(self.notes)}")
        return False


@pytest.fixture
def criterion():
    """``with criterion("C1 ...") as c:`` records one acceptance line, pass or fail."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, notes in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}" + (f" ({notes})" if notes else ""))
