__version__ = "0.1.0"

from latentaug.exception import LatentAugError
from latentaug.data_model import Manifest, ImageRecord, load_manifest, make_splits
from latentaug.gan_core import StyleStack, GanConfig, train_gan, load_generator, synthesize
