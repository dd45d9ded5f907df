"""Hot kernels with two interchangeable backends (see `p2g.accel`)."""

from ..accel import NUMBA_ENABLED

if NUMBA_ENABLED:
    from ._numba_impl import (  # noqa: F401
        adam_update,
        fps_greedy,
        knn,
        nn_sq,
        render_backward,
        render_forward,
        scatter_add_flat,
        scatter_add_rows,
        zbuffer_build,
        zbuffer_query,
    )
else:
    from ._numpy_impl import (  # noqa: F401
        adam_update,
        fps_greedy,
        knn,
        nn_sq,
        render_backward,
        render_forward,
        scatter_add_flat,
        scatter_add_rows,
        zbuffer_build,
        zbuffer_query,
    )
