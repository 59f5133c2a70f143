//! The per-dataset prompt templates.
//!
//! Each template is a fixed instruction header followed by the actual
//! payload under a `The information:` marker. Item prompts inline the
//! item's metadata as a JSON object (plus a feedback list where the
//! template asks for one); user prompts inline one JSON block per
//! interacted item, in input order. Rendering is pure: the same inputs
//! always produce byte-identical bodies.

use std::collections::BTreeMap;

use super::{Dataset, NodeKind, ProfileError, PromptText};

/// One interacted item as it appears inside a user prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractedItem {
    pub title: String,
    /// Typically the item's own generated profile.
    pub description: String,
    pub review: String,
}

const AMAZON_ITEM_HEADER: &str = "You will serve as an assistant to help me summarise which types of users would enjoy a specific book. I will provide you with the title and a description of the book. Here are the instructions:\n\
1. I will provide you with information in the form of a JSON string that describes the book:\n\
{\"title\": \"the title of the book\", \"description\": \"a description of the book\"}";

const AMAZON_USER_HEADER: &str = "You will serve as an assistant to help me determine which types of books a specific user is likely to enjoy.\n\
I will provide you with information about books that the user has purchased, as well as his or her reviews of those books. Here are the instructions:\n\
1. Each purchased book will be described in JSON format, with the following attributes:\n\
{\"title\": \"the title of the book\", \"description\": \"a description of what types of users will like this book\", \"review\": \"the user's review on the book\"}\n\
2. The information I will give you: a list of JSON strings describing the items that the user has purchased.";

const YELP_ITEM_HEADER: &str = "You will serve as an assistant to help me summarise which types of users would enjoy a specific video game.\n\
I will provide you with the basic information (name, publisher, genres and tags) of that game and also some feedback of users for it.\n\
Here are the instructions:\n\
1. The basic information will be described in JSON format, with the following attributes:\n\
{\n\
    \"name\": \"the name of the video game\",\n\
    \"publisher\": \"the publisher of the game\",\n\
    \"genres\": \"the genres of the game\",\n\
    \"tags\": \"several tags describing the game\"\n\
}\n\
2. Feedback from users will be managed in the following List format: [\"the first feedback\", \"the second feedback\", ....]\n\
3. The information I will give you: a JSON string describing the basic information about the game; a List object containing some feedback from users about the game.";

const YELP_USER_HEADER: &str = "You will serve as an assistant to help me determine which types of game a specific user is likely to enjoy.\n\
I will provide you with information about games that the user has interacted, as well as his or her reviews of those games. Here are the instructions:\n\
1. Each interacted game will be described in JSON format, with the following attributes:\n\
{\"title\": \"the name/title of the game\", \"description\": \"a description of what types of users will like this game\", \"review\": \"the user's review on the game\"}\n\
2. The information I will give you: a list of JSON strings describing the games that the user has played.";

const STEAM_ITEM_HEADER: &str = "You will serve as an assistant to help me summarise which types of users would enjoy a specific business.\n\
I will provide you with the basic information (name, city and category) of that business and also some feedback of users for it.\n\
Here are the instructions:\n\
1. The basic information will be described in JSON format, with the following attributes:\n\
{\n\
    \"name\": \"the name of the business\",\n\
    \"city\": \"city where the company is located\", (if there is no city, I will set this value to \"None\")\n\
    \"categories\": \"several tags describing the business\" (if there is no categories, I will set this value to \"None\")\n\
}\n\
2. Feedback from users will be managed in the following List format:\n\
[\n\
    \"the first feedback\",\n\
    \"the second feedback\",\n\
    ....\n\
]\n\
3. The information I will give you: a JSON string describing the basic information about the business. a list object containing some feedback from users about the business.";

const STEAM_USER_HEADER: &str = "You will serve as an assistant to help me determine which types of business a specific user is likely to enjoy.\n\
I will provide you with information about businesses that the user has interacted, as well as his or her reviews of those businesses.\n\
Here are the instructions:\n\
1. Each interacted business will be described in JSON format, with the following attributes:\n\
{\n\
    \"title\": \"the name of the business\",\n\
    \"description\": \"a description of what types of users will like this business\",\n\
    \"review\": \"the user's review on the business\"\n\
}\n\
2. The information I will give you: a list of JSON strings describing the businesses that the user has interacted.";

const CUSTOM_ITEM_HEADER: &str = "You will serve as an assistant to help me summarise which types of users would enjoy a specific item.\n\
I will provide you with the item's attributes and also some feedback of users for it.\n\
Here are the instructions:\n\
1. The item will be described in JSON format, one attribute per key.\n\
2. Feedback from users will be managed in the following List format: [\"the first feedback\", \"the second feedback\", ....]\n\
3. The information I will give you: a JSON string describing the item; a List object containing some feedback from users about the item.";

const CUSTOM_USER_HEADER: &str = "You will serve as an assistant to help me determine which types of items a specific user is likely to enjoy.\n\
I will provide you with information about items that the user has interacted, as well as his or her reviews of those items. Here are the instructions:\n\
1. Each interacted item will be described in JSON format, with the following attributes:\n\
{\"title\": \"the name of the item\", \"description\": \"a description of what types of users will like this item\", \"review\": \"the user's review on the item\"}\n\
2. The information I will give you: a list of JSON strings describing the items that the user has interacted.";

const INFORMATION_MARKER: &str = "\n\nThe information:\n";

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

fn required<'a>(
    meta: &'a BTreeMap<String, String>,
    dataset: Dataset,
    key: &'static str,
) -> Result<&'a str, ProfileError> {
    meta.get(key).map(String::as_str).ok_or(ProfileError::MissingKey { dataset, key })
}

fn optional<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> &'a str {
    meta.get(key).map_or("None", String::as_str)
}

fn meta_object(pairs: &[(&str, &str)]) -> String {
    let fields: Vec<String> =
        pairs.iter().map(|(k, v)| format!("{}: {}", json_str(k), json_str(v))).collect();
    format!("{{{}}}", fields.join(", "))
}

/// Renders an item prompt from the item's metadata and user feedback.
///
/// Required metadata keys: `title` and `description` for amazon,
/// `name` for yelp and steam, `title` for custom. The remaining
/// template keys fall back to `"None"` when absent; custom renders
/// every provided key. The amazon template carries no feedback list.
pub fn build_item_prompt(
    meta: &BTreeMap<String, String>,
    feedback: &[String],
    dataset: Dataset,
) -> Result<PromptText, ProfileError> {
    let feedback_json = serde_json::to_string(feedback)
        .expect("string list serialization cannot fail");
    let body = match dataset {
        Dataset::Amazon => {
            let payload = meta_object(&[
                ("title", required(meta, dataset, "title")?),
                ("description", required(meta, dataset, "description")?),
            ]);
            format!("{AMAZON_ITEM_HEADER}{INFORMATION_MARKER}{payload}")
        }
        Dataset::Yelp => {
            let payload = meta_object(&[
                ("name", required(meta, dataset, "name")?),
                ("publisher", optional(meta, "publisher")),
                ("genres", optional(meta, "genres")),
                ("tags", optional(meta, "tags")),
            ]);
            format!("{YELP_ITEM_HEADER}{INFORMATION_MARKER}{payload}\n{feedback_json}")
        }
        Dataset::Steam => {
            let payload = meta_object(&[
                ("name", required(meta, dataset, "name")?),
                ("city", optional(meta, "city")),
                ("categories", optional(meta, "categories")),
            ]);
            format!("{STEAM_ITEM_HEADER}{INFORMATION_MARKER}{payload}\n{feedback_json}")
        }
        Dataset::Custom => {
            let title = required(meta, dataset, "title")?;
            let mut pairs = vec![("title", title)];
            pairs.extend(
                meta.iter().filter(|(k, _)| k.as_str() != "title").map(|(k, v)| {
                    (k.as_str(), v.as_str())
                }),
            );
            let payload = meta_object(&pairs);
            format!("{CUSTOM_ITEM_HEADER}{INFORMATION_MARKER}{payload}\n{feedback_json}")
        }
    };
    Ok(PromptText { kind: NodeKind::Item, dataset, body })
}

/// Renders a user prompt from the user's interacted items, one JSON
/// block per item in input order. The list must be nonempty.
pub fn build_user_prompt(
    items: &[InteractedItem],
    dataset: Dataset,
) -> Result<PromptText, ProfileError> {
    if items.is_empty() {
        return Err(ProfileError::EmptyItemList);
    }
    let header = match dataset {
        Dataset::Amazon => AMAZON_USER_HEADER,
        Dataset::Yelp => YELP_USER_HEADER,
        Dataset::Steam => STEAM_USER_HEADER,
        Dataset::Custom => CUSTOM_USER_HEADER,
    };
    let blocks: Vec<String> = items
        .iter()
        .map(|item| {
            meta_object(&[
                ("title", &item.title),
                ("description", &item.description),
                ("review", &item.review),
            ])
        })
        .collect();
    let body = format!("{header}{INFORMATION_MARKER}[\n{}\n]", blocks.join(",\n"));
    Ok(PromptText { kind: NodeKind::User, dataset, body })
}
