# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

# ruff: noqa

from .constants import *
from .exceptions import *
from .tensor import *
from .optim import *
from .world import *
from .header import *
from .dataset import *
from .reader import *
from .writer import *
from .model import *
from .flow import *
from .sampler import *
from .trainer import *
from .metrics import *
from .config import *
from .gradcheck import run_suite
