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


class TwoHopException(Exception):
    pass


class InvalidSpec(TwoHopException, ValueError):
    pass


class IndexOutOfRange(TwoHopException, IndexError):
    pass


class InvalidConfig(TwoHopException, ValueError):
    pass


class InvalidDimension(InvalidConfig):
    message = "Instance size n must be at least 2"


class UnknownToken(TwoHopException, KeyError):
    pass


class ShapeMismatch(TwoHopException, ValueError):
    pass


class SequenceTooLong(TwoHopException, ValueError):
    pass


class CorruptFile(TwoHopException, OSError):
    pass


class InfeasiblePoint(TwoHopException, ValueError):
    pass


class SweepError(TwoHopException, RuntimeError):
    pass


class NumericalError(TwoHopException, ArithmeticError):
    pass


class NumericalOverflow(NumericalError):
    message = "Non-finite value in softmax cross-entropy"


class Diverged(NumericalError):
    message = "Training loss became non-finite"


class NegativeRadicand(NumericalError):
    pass


class DidNotConverge(NumericalError):
    pass
