use taclab::ErrorCategory;

/// A terminal error with the category that picks the exit code.
#[derive(Debug)]
pub struct Failure {
    pub category: Category,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Core(ErrorCategory),
    Interrupted,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { category: Category::Core(ErrorCategory::Config), message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Failure { category: Category::Core(ErrorCategory::Io), message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Failure { category: Category::Core(ErrorCategory::Numerical), message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Failure { category: Category::Core(ErrorCategory::Validation), message: message.into() }
    }

    pub fn interrupted() -> Self {
        Failure { category: Category::Interrupted, message: "interrupted; completed results were written".into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category {
            Category::Core(ErrorCategory::Io) => 1,
            Category::Core(ErrorCategory::Config) => 2,
            Category::Core(ErrorCategory::Numerical) => 3,
            Category::Core(ErrorCategory::Validation) => 4,
            Category::Interrupted => 130,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.category {
            Category::Core(c) => c.as_str(),
            Category::Interrupted => "interrupted",
        }
    }
}

impl From<taclab::Error> for Failure {
    fn from(e: taclab::Error) -> Self {
        Failure { category: Category::Core(e.category()), message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::io(e.to_string())
    }
}
