from pathlib import Path
from typing import Optional

from app.exceptions import StateError
from app.models.params import TrainedModel
from app.services.checkpoint import load_checkpoint
from app.services.inference import FcnModel, to_fcn
from app.utils.logger import get_logger

logger = get_logger("model_service")


class ModelService:
    def __init__(self):
        self.model: Optional[TrainedModel] = None
        self.fcn: Optional[FcnModel] = None
        self.checkpoint_path: Optional[str] = None
        self.is_loaded = False

    def load_model(self, path):
        """Load a checkpoint and keep its fully convolutional form in memory"""
        path = Path(path)
        try:
            logger.info(f"Loading checkpoint: {path}")

            model = load_checkpoint(path)
            fcn = to_fcn(model.params)

            self.model = model
            self.fcn = fcn
            self.checkpoint_path = str(path)
            self.is_loaded = True
            logger.info(f"Model loaded from {path} ({model.provenance.kind.value}, "
                        f"{model.params.num_parameters()} parameters)")

        except Exception as e:
            logger.error(f"Failed to load checkpoint {path}: {str(e)}", exc_info=True)
            raise

    def get_model(self) -> TrainedModel:
        """Get the loaded model"""
        if not self.is_loaded:
            raise StateError("Model not loaded. Call load_model() first.")
        return self.model

    def get_fcn(self) -> FcnModel:
        """Get the fully convolutional network used for segmentation"""
        if not self.is_loaded:
            raise StateError("Model not loaded. Call load_model() first.")
        return self.fcn

    def unload(self):
        self.model = None
        self.fcn = None
        self.checkpoint_path = None
        self.is_loaded = False

    def is_model_loaded(self):
        """Check if the model is loaded"""
        return self.is_loaded

# Global instance
model_service = ModelService()
