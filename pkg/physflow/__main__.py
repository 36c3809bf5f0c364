# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

import sys

from physflow.cli import main

sys.exit(main())
