from .dataset import DatasetError, SliceDataset
from .manifest import DatasetManifest, ManifestError, ManifestRow, SubjectMeta
from .phantom import (
    EvalPair,
    PhantomDataset,
    PhantomSpec,
    PhantomSpecError,
    generate_phantom_dataset,
    render_phantom,
    ventricle_area,
)
from .volumes import (
    N_SLICES,
    DegenerateVolumeError,
    Volume,
    VolumeIOError,
    coronal_view,
    interslice_discontinuity,
    load_volume,
    middle_slice_start,
    preprocess_volume,
    preprocessed_header,
    sagittal_view,
    save_volume,
    stack_slices,
)
