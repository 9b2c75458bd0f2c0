import logging
import os
import sys

import dotenv

dotenv.load_dotenv()

logging.basicConfig(
    level=os.getenv('ERIM_LOG_LEVEL', 'WARNING').upper(),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    stream=sys.stderr,
)

from app.routes.cli import main  # noqa: E402

if __name__ == '__main__':
    sys.exit(main())
