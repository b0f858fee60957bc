#
# This file is part of twohop-lab
# Copyright (c) 2024-2025, the twohop-lab developers.
# All rights reserved.
#
# Identity-bridge experiments for two-hop compositional reasoning
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#

from __future__ import annotations

from pathlib import Path

import pytest


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--skip-slow",
        action="store_true",
        default=False,
        help="skip end-to-end reproductions marked slow",
    )


def pytest_collection_modifyitems(
    config: pytest.Config, items: list[pytest.Item]
) -> None:
    if not config.getoption("--skip-slow"):
        return
    skip = pytest.mark.skip(reason="--skip-slow given")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def isolated_rc(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    """Keep rc files and environment defaults of the developer out of tests."""
    for name in ("TWOHOP_LOG", "TWOHOP_WORKERS", "TWOHOP_OUT"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setattr(Path, "home", lambda: tmp_path / "home")
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def test_dir(request: pytest.FixtureRequest) -> Path:
    return request.path.parent
