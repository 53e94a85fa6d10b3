use std::fmt;

/// Exit code families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Train,
    Eval,
}

impl Category {
    pub fn exit_code(self) -> u8 {
        match self {
            Category::Config => 2,
            Category::Data => 3,
            Category::Train => 4,
            Category::Eval => 5,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Train => "train",
            Category::Eval => "eval",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub category: Category,
    pub message: String,
}

impl Failure {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.category.label(), self.message)
    }
}

impl std::error::Error for Failure {}

/// Tags a core error with the category of the step that produced it.
pub trait Tag<T> {
    fn tag(self, category: Category) -> Result<T, Failure>;
}

impl<T, E: fmt::Display> Tag<T> for Result<T, E> {
    fn tag(self, category: Category) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(category, e.to_string()))
    }
}
